//! The designed filter bank: per channel, M filters of size k x k, each with
//! unit energy and zero coefficient sum, mutually near-orthogonal within a
//! channel (|dot| <= epsilon; the solver actually delivers exact orthogonality).
//!
//! Serialization is a plain text format, tag "DFBK1":
//!
//! ```text
//! DFBK1 <channels> <filters_per_channel> <k> <epsilon>
//! <channel> <m>
//! <k coefficients> x k lines, 9 significant digits
//! ... one block per (channel, m), channel-major ...
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Plane;

#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    channels: usize,
    filters_per_channel: usize,
    k: usize,
    epsilon: f64,
    /// Coefficients, [channel][m][k*k] flattened, filter grids row-major.
    coeffs: Vec<f64>,
}

impl FilterBank {
    pub fn from_filters(
        channels: usize,
        filters_per_channel: usize,
        k: usize,
        epsilon: f64,
        coeffs: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 || filters_per_channel == 0 || k == 0 {
            return Err(Error::EmptyInput);
        }
        if coeffs.len() != channels * filters_per_channel * k * k {
            return Err(Error::ShapeMismatch(format!(
                "bank expects {} coefficients, got {}",
                channels * filters_per_channel * k * k,
                coeffs.len()
            )));
        }
        Ok(Self {
            channels,
            filters_per_channel,
            k,
            epsilon,
            coeffs,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn filters_per_channel(&self) -> usize {
        self.filters_per_channel
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Coefficients of filter m for a channel, row-major, length k*k.
    pub fn filter(&self, channel: usize, m: usize) -> &[f64] {
        let kk = self.k * self.k;
        let start = (channel * self.filters_per_channel + m) * kk;
        &self.coeffs[start..start + kk]
    }

    pub fn filter_plane(&self, channel: usize, m: usize) -> Plane {
        Plane::from_vec(self.k, self.k, self.filter(channel, m).to_vec())
            .expect("bank stores k*k coefficients per filter")
    }

    pub fn to_dfbk_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "DFBK1 {} {} {} {}\n",
            self.channels, self.filters_per_channel, self.k, self.epsilon
        ));
        for c in 0..self.channels {
            for m in 0..self.filters_per_channel {
                out.push_str(&format!("{c} {m}\n"));
                let f = self.filter(c, m);
                for row in 0..self.k {
                    let line: Vec<String> = (0..self.k)
                        .map(|col| format!("{:.8e}", f[row * self.k + col]))
                        .collect();
                    out.push_str(&line.join(" "));
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn parse_dfbk(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty bank file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "DFBK1" {
            return Err(bad("bank header must be `DFBK1 C M k epsilon`"));
        }
        let channels: usize = parse_field(fields[1], "channel count")?;
        let filters: usize = parse_field(fields[2], "filter count")?;
        let k: usize = parse_field(fields[3], "filter size")?;
        let epsilon: f64 = parse_field(fields[4], "epsilon")?;
        if channels == 0 || filters == 0 || k == 0 {
            return Err(bad("bank header has a zero dimension"));
        }
        let mut coeffs = Vec::with_capacity(channels * filters * k * k);
        for c in 0..channels {
            for m in 0..filters {
                let tag = lines
                    .next()
                    .ok_or_else(|| bad("bank truncated before filter block"))?;
                let ids: Vec<&str> = tag.split_whitespace().collect();
                if ids.len() != 2
                    || ids[0] != c.to_string()
                    || ids[1] != m.to_string()
                {
                    return Err(bad(&format!(
                        "expected block header `{c} {m}`, found `{tag}`"
                    )));
                }
                for _ in 0..k {
                    let row = lines
                        .next()
                        .ok_or_else(|| bad("bank truncated inside filter block"))?;
                    let vals: Vec<&str> = row.split_whitespace().collect();
                    if vals.len() != k {
                        return Err(bad(&format!(
                            "filter row has {} values, expected {k}",
                            vals.len()
                        )));
                    }
                    for v in vals {
                        coeffs.push(parse_field::<f64>(v, "coefficient")?);
                    }
                }
            }
        }
        FilterBank::from_filters(channels, filters, k, epsilon, coeffs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_dfbk_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_dfbk(&text)
    }
}

fn bad(msg: &str) -> Error {
    Error::Format(format!("malformed DFBK1 bank: {msg}"))
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| bad(&format!("cannot parse {what} from `{s}`")))
}

/// Measured constraint slack for one filter.
#[derive(Clone, Debug)]
pub struct FilterCheck {
    pub channel: usize,
    pub index: usize,
    /// | ||f|| - 1 |
    pub norm_deviation: f64,
    /// Sum of coefficients (zero for a DC-free filter).
    pub dc_sum: f64,
    /// Largest |dot| against the other filters of the same channel.
    pub max_abs_dot: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FeasibilityReport {
    pub checks: Vec<FilterCheck>,
    pub violations: Vec<String>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

const FEASIBILITY_TOL: f64 = 1e-5;

/// Measure every filter against the three bank constraints. Violations beyond
/// 1e-5 (plus epsilon, for pairwise dots) are listed; the report never errors.
pub fn check_feasibility(bank: &FilterBank) -> FeasibilityReport {
    let mut report = FeasibilityReport::default();
    for c in 0..bank.channels() {
        for m in 0..bank.filters_per_channel() {
            let f = bank.filter(c, m);
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm_deviation = (norm - 1.0).abs();
            let dc_sum: f64 = f.iter().sum();
            let mut max_abs_dot: f64 = 0.0;
            for other in 0..bank.filters_per_channel() {
                if other == m {
                    continue;
                }
                let g = bank.filter(c, other);
                let dot: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
                max_abs_dot = max_abs_dot.max(dot.abs());
            }
            if norm_deviation > FEASIBILITY_TOL {
                report.violations.push(format!(
                    "channel {c} filter {m}: norm deviates by {norm_deviation:.3e}"
                ));
            }
            if dc_sum.abs() > FEASIBILITY_TOL {
                report.violations.push(format!(
                    "channel {c} filter {m}: coefficient sum {dc_sum:.3e}"
                ));
            }
            if max_abs_dot > bank.epsilon() + FEASIBILITY_TOL {
                report.violations.push(format!(
                    "channel {c} filter {m}: pairwise |dot| {max_abs_dot:.3e} exceeds epsilon {}",
                    bank.epsilon()
                ));
            }
            report.checks.push(FilterCheck {
                channel: c,
                index: m,
                norm_deviation,
                dc_sum,
                max_abs_dot,
            });
        }
    }
    report
}
