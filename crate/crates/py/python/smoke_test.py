"""Smoke test for the compiled bindings: python python/smoke_test.py"""

import math
import os
import tempfile

import hapo

SMALL = ["batch_size=4", "eval_prompts=4", "warm_start.steps=5", "steps=3"]


def main():
    cfg = hapo.TrainConfig(overrides=SMALL + ["algo=hapo"])
    assert cfg.algo == "hapo" and cfg.components == "ABCD" and cfg.steps == 3
    assert "eps_high = 0.28" in cfg.to_toml()
    assert hapo.TrainConfig(cfg.to_toml()).to_toml() == cfg.to_toml()

    try:
        hapo.TrainConfig(overrides=["clip.epsilon_hgih=0.3"])
    except ValueError as e:
        assert "epsilon_hgih" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    trainer = hapo.Trainer(cfg)
    m = trainer.step()
    assert m["step"] == 0 and trainer.step_count == 1
    m, records = trainer.step(evaluate=True, trace=True)
    assert m["eval_sampled"] is not None and records
    greedy, sampled = trainer.evaluate()
    assert 0.0 <= greedy <= 1.0 and 0.0 <= sampled <= 1.0
    assert trainer.entropy_stats["sigma"] > 0.0

    stats = hapo.batch_stats([0.1, 0.5, 1.0, 2.0])
    assert stats["rho"] == 80.0
    assert hapo.adaptive_temperature(1.0, 0.0, 1.0) == 1.0
    assert hapo.clip_bounds(0.5) == (0.2, 0.28 * 1.5)
    adv = hapo.token_advantages([1.0, 0.0], [2, 3])
    assert [len(a) for a in adv] == [2, 3]
    assert math.isclose(sum(sum(a) for a in adv), 0.0, abs_tol=1e-12)
    assert hapo.token_surrogate(1.5, 1.0, 0.2, 0.28) == (1.28, False, True)

    with tempfile.TemporaryDirectory() as tmp:
        runs = []
        for name in ["a", "b"]:
            out = os.path.join(tmp, name)
            summary = hapo.run(cfg.with_overrides(["trace=true"]), out)
            assert summary["steps"] == 3
            runs.append(out)
        table = hapo.analyze(os.path.join(runs[0], "trace.jsonl"), "dual_entropy")
        assert table.startswith("# report: dual_entropy")
        rows = hapo.compare(runs).splitlines()
        assert len(rows) == 3 and rows[1].split(",", 1)[1] == rows[2].split(",", 1)[1]

    print("smoke test passed")


if __name__ == "__main__":
    main()
