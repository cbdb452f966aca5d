//! Diagnostic reports over token traces, written as comma-separated tables.
//! Lines starting with `#` describe the report and its bucket edges.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::entropy_stats::percentile_linear;
use crate::error::{HapoError, Result};
use crate::metrics::{read_jsonl, TraceRecord};
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Report {
    ClipPatterns,
    RatioEntropy,
    DualEntropy,
    EntropyLandscape,
}

impl Report {
    pub const ALL: [Report; 4] = [
        Report::ClipPatterns,
        Report::RatioEntropy,
        Report::DualEntropy,
        Report::EntropyLandscape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Report::ClipPatterns => "clip_patterns",
            Report::RatioEntropy => "ratio_entropy",
            Report::DualEntropy => "dual_entropy",
            Report::EntropyLandscape => "entropy_landscape",
        }
    }
}

impl FromStr for Report {
    type Err = HapoError;

    fn from_str(s: &str) -> Result<Self> {
        Report::ALL
            .into_iter()
            .find(|r| r.name() == s.replace('-', "_"))
            .ok_or_else(|| {
                HapoError::Config(format!(
                    "unknown report `{s}` (expected clip_patterns, ratio_entropy, dual_entropy or entropy_landscape)"
                ))
            })
    }
}

/// Upper edges of the ratio axis; the last bucket is open.
pub const RATIO_EDGES: [f64; 10] = [0.6, 0.8, 0.9, 0.95, 1.0, 1.05, 1.1, 1.2, 1.4, 2.0];
pub const LANDSCAPE_BINS: usize = 20;

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt(x)).collect::<Vec<_>>().join(",")
}

/// Decile edges `e_0..=e_10` of `values` (linear interpolation).
fn decile_edges(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (0..=10).map(|k| percentile_linear(&sorted, 10.0 * k as f64)).collect()
}

/// Bucket `b` holds `edges[b] <= x < edges[b + 1]`; the last one is closed.
fn decile_of(x: f64, edges: &[f64]) -> usize {
    edges[1..10].iter().filter(|&&e| e <= x).count()
}

pub fn render(report: Report, records: &[TraceRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(HapoError::Training("trace is empty".into()));
    }
    Ok(match report {
        Report::ClipPatterns => clip_patterns(records),
        Report::RatioEntropy => ratio_entropy(records),
        Report::DualEntropy => dual_entropy(records),
        Report::EntropyLandscape => entropy_landscape(records),
    })
}

/// Optimized tokens, or every token if the trace carries no optimizer data.
fn optimized(records: &[TraceRecord]) -> Vec<&TraceRecord> {
    let with: Vec<&TraceRecord> = records.iter().filter(|r| r.ratio.is_some()).collect();
    if with.is_empty() {
        records.iter().collect()
    } else {
        with
    }
}

fn clip_patterns(records: &[TraceRecord]) -> String {
    let rows = optimized(records);
    let entropies: Vec<f64> = rows.iter().map(|r| r.entropy).collect();
    let edges = decile_edges(&entropies);
    // [tokens, left_pos, left_nonpos, right_pos, right_nonpos]
    let mut counts = [[0u64; 5]; 10];
    for r in &rows {
        let c = &mut counts[decile_of(r.entropy, &edges)];
        let pos = r.h_tilde.is_some_and(|h| h > 0.0);
        c[0] += 1;
        if r.clipped_left {
            c[if pos { 1 } else { 2 }] += 1;
        }
        if r.clipped_right {
            c[if pos { 3 } else { 4 }] += 1;
        }
    }
    let mut out = String::new();
    writeln!(out, "# report: clip_patterns").unwrap();
    writeln!(out, "# tokens: {}", rows.len()).unwrap();
    writeln!(out, "# entropy_decile_edges: {}", join(&edges)).unwrap();
    writeln!(
        out,
        "bucket,entropy_lo,entropy_hi,tokens,left_clips_h_pos,left_clips_h_nonpos,right_clips_h_pos,right_clips_h_nonpos,left_rate,right_rate"
    )
    .unwrap();
    for (b, c) in counts.iter().enumerate() {
        let rate = |n: u64| if c[0] == 0 { 0.0 } else { n as f64 / c[0] as f64 };
        writeln!(
            out,
            "{b},{},{},{},{},{},{},{},{},{}",
            fmt(edges[b]),
            fmt(edges[b + 1]),
            c[0],
            c[1],
            c[2],
            c[3],
            c[4],
            fmt(rate(c[1] + c[2])),
            fmt(rate(c[3] + c[4]))
        )
        .unwrap();
    }
    out
}

fn ratio_bucket(ratio: f64) -> usize {
    RATIO_EDGES.iter().filter(|&&e| e <= ratio).count()
}

fn ratio_entropy(records: &[TraceRecord]) -> String {
    let rows: Vec<&TraceRecord> = records.iter().filter(|r| r.ratio.is_some()).collect();
    let mut out = String::new();
    writeln!(out, "# report: ratio_entropy").unwrap();
    writeln!(out, "# tokens_with_ratio: {}", rows.len()).unwrap();
    writeln!(out, "# ratio_upper_edges: {}", join(&RATIO_EDGES)).unwrap();
    if rows.is_empty() {
        writeln!(out, "# entropy_decile_edges:").unwrap();
        writeln!(out, "entropy_bucket,ratio_bucket,ratio_lo,ratio_hi,count").unwrap();
        return out;
    }
    let entropies: Vec<f64> = rows.iter().map(|r| r.entropy).collect();
    let edges = decile_edges(&entropies);
    writeln!(out, "# entropy_decile_edges: {}", join(&edges)).unwrap();
    let nr = RATIO_EDGES.len() + 1;
    let mut grid = vec![vec![0u64; nr]; 10];
    for r in &rows {
        grid[decile_of(r.entropy, &edges)][ratio_bucket(r.ratio.unwrap())] += 1;
    }
    writeln!(out, "entropy_bucket,ratio_bucket,ratio_lo,ratio_hi,count").unwrap();
    for (e, row) in grid.iter().enumerate() {
        for (k, n) in row.iter().enumerate() {
            let lo = if k == 0 { 0.0 } else { RATIO_EDGES[k - 1] };
            let hi = RATIO_EDGES.get(k).map_or("inf".to_string(), |&x| fmt(x));
            writeln!(out, "{e},{k},{},{hi},{n}", fmt(lo)).unwrap();
        }
    }
    out
}

fn dual_entropy(records: &[TraceRecord]) -> String {
    // token -> (count, min, max, sum)
    let mut by_token: BTreeMap<TokenId, (u64, f64, f64, f64)> = BTreeMap::new();
    for r in records {
        let e = by_token.entry(r.token).or_insert((0, f64::INFINITY, f64::NEG_INFINITY, 0.0));
        e.0 += 1;
        e.1 = e.1.min(r.entropy);
        e.2 = e.2.max(r.entropy);
        e.3 += r.entropy;
    }
    let mut rows: Vec<(TokenId, u64, f64, f64, f64)> = by_token
        .into_iter()
        .map(|(t, (n, lo, hi, sum))| (t, n, lo, hi, sum / n as f64))
        .collect();
    rows.sort_by(|a, b| (b.3 - b.2).total_cmp(&(a.3 - a.2)).then(a.0.cmp(&b.0)));
    let mut out = String::new();
    writeln!(out, "# report: dual_entropy").unwrap();
    writeln!(out, "# ranked by entropy spread (max - min), ties by token id").unwrap();
    writeln!(out, "rank,token,count,entropy_min,entropy_max,spread,entropy_mean").unwrap();
    for (i, (t, n, lo, hi, mean)) in rows.iter().enumerate() {
        writeln!(out, "{},{t},{n},{},{},{},{}", i + 1, fmt(*lo), fmt(*hi), fmt(hi - lo), fmt(*mean)).unwrap();
    }
    out
}

fn entropy_landscape(records: &[TraceRecord]) -> String {
    let lo = records.iter().map(|r| r.entropy).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.entropy).fold(f64::NEG_INFINITY, f64::max);
    let bins = if hi > lo { LANDSCAPE_BINS } else { 1 };
    let width = if bins > 1 { (hi - lo) / bins as f64 } else { 0.0 };
    let edges: Vec<f64> = (0..=bins)
        .map(|k| if k == bins { hi } else { lo + k as f64 * width })
        .collect();
    // [count, sum of sampled-token probability]
    let mut acc = vec![(0u64, 0.0f64); bins];
    for r in records {
        let b = if bins == 1 {
            0
        } else {
            (((r.entropy - lo) / width) as usize).min(bins - 1)
        };
        acc[b].0 += 1;
        acc[b].1 += r.old_log_prob.exp();
    }
    let n = records.len() as f64;
    let mut out = String::new();
    writeln!(out, "# report: entropy_landscape").unwrap();
    writeln!(out, "# tokens: {}", records.len()).unwrap();
    writeln!(out, "# bin_edges: {}", join(&edges)).unwrap();
    writeln!(out, "bin,entropy_lo,entropy_hi,count,frequency,mean_token_prob").unwrap();
    for (b, (count, p)) in acc.iter().enumerate() {
        let mean_p = if *count == 0 { 0.0 } else { p / *count as f64 };
        writeln!(
            out,
            "{b},{},{},{count},{},{}",
            fmt(edges[b]),
            fmt(edges[b + 1]),
            fmt(*count as f64 / n),
            fmt(mean_p)
        )
        .unwrap();
    }
    out
}

/// Reads `trace`, renders `report` and writes it to `out`.
pub fn analyze_file(trace: &Path, report: Report, out: &Path) -> Result<()> {
    let records: Vec<TraceRecord> = read_jsonl(trace)?;
    if records.is_empty() {
        return Err(HapoError::Parse {
            path: trace.display().to_string(),
            message: "trace is empty".into(),
        });
    }
    let text = render(report, &records)?;
    std::fs::write(out, text).map_err(|e| HapoError::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(token: TokenId, entropy: f64) -> TraceRecord {
        TraceRecord {
            step: 0,
            prompt_id: 0,
            seq: 0,
            position: 0,
            token,
            entropy,
            temperature: 1.0,
            old_log_prob: -1.0,
            reward: 0,
            ratio: None,
            h_tilde: None,
            advantage: None,
            clipped_left: false,
            clipped_right: false,
        }
    }

    fn data_rows(s: &str) -> Vec<Vec<String>> {
        s.lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .map(|l| l.split(',').map(String::from).collect())
            .collect()
    }

    #[test]
    fn empty_trace_is_error() {
        for r in Report::ALL {
            assert!(render(r, &[]).is_err());
        }
    }

    #[test]
    fn uniform_trace_has_single_bin() {
        let h = (13f64).ln();
        let recs: Vec<_> = (0..50).map(|i| rec(i % 13, h)).collect();
        let out = render(Report::EntropyLandscape, &recs).unwrap();
        let rows = data_rows(&out);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0][1], fmt(h));
        assert_eq!(rows[0][3], "50");
    }

    #[test]
    fn dual_entropy_ranks_spread() {
        let recs = vec![rec(7, 0.01), rec(7, 2.0), rec(3, 0.5), rec(3, 0.6), rec(4, 1.0)];
        let rows = data_rows(&render(Report::DualEntropy, &recs).unwrap());
        assert_eq!(rows[0][1], "7");
        assert_eq!(rows[1][1], "3");
    }

    #[test]
    fn left_clips_stay_in_nonpositive_columns() {
        let recs: Vec<_> = (0..100)
            .map(|i| {
                let e = i as f64 / 50.0;
                let mut r = rec(1, e);
                r.ratio = Some(if i < 50 { 0.5 } else { 1.0 });
                r.h_tilde = Some(if i < 50 { -0.5 } else { 0.5 });
                r.clipped_left = i < 50;
                r
            })
            .collect();
        let out = render(Report::ClipPatterns, &recs).unwrap();
        assert!(out.contains("# entropy_decile_edges:"));
        let rows = data_rows(&out);
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().all(|r| r[4] == "0"));
        assert_eq!(rows.iter().map(|r| r[5].parse::<u64>().unwrap()).sum::<u64>(), 50);
    }

    #[test]
    fn ratio_histogram_counts_everything() {
        let recs: Vec<_> = (0..40)
            .map(|i| {
                let mut r = rec(1, i as f64 * 0.1);
                r.ratio = Some(0.5 + i as f64 * 0.05);
                r
            })
            .collect();
        let rows = data_rows(&render(Report::RatioEntropy, &recs).unwrap());
        assert_eq!(rows.len(), 10 * (RATIO_EDGES.len() + 1));
        assert_eq!(rows.iter().map(|r| r[4].parse::<u64>().unwrap()).sum::<u64>(), 40);
    }

    #[test]
    fn deterministic_output() {
        let recs: Vec<_> = (0..30).map(|i| rec(i % 5, (i as f64).sin().abs())).collect();
        for r in Report::ALL {
            assert_eq!(render(r, &recs).unwrap(), render(r, &recs).unwrap());
        }
    }

    #[test]
    fn report_names() {
        for r in Report::ALL {
            assert_eq!(r.name().parse::<Report>().unwrap(), r);
        }
        assert!("bogus".parse::<Report>().is_err());
    }
}
