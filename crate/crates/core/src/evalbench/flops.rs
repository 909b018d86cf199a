use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelHyper;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Zf,
    Wmmse,
    Proposed,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zf" => Ok(Self::Zf),
            "wmmse" => Ok(Self::Wmmse),
            "proposed" | "model" => Ok(Self::Proposed),
            _ => Err(Error::UnknownAlgorithm(s.to_string())),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Zf => "zf",
            Self::Wmmse => "wmmse",
            Self::Proposed => "proposed",
        })
    }
}

/// Closed-form FLOPs to compute one precoder. `iterations` only matters for
/// WMMSE.
pub fn flop_count(
    algorithm: Algorithm,
    n_users: usize,
    n_tx: usize,
    iterations: usize,
) -> Result<f64> {
    if n_users == 0 || n_tx == 0 {
        return Err(Error::invalid("flop count needs positive dimensions"));
    }
    let u = n_users as f64;
    let t = n_tx as f64;
    Ok(match algorithm {
        Algorithm::Zf => 7.0 * (2.0 / 3.0 * u.powi(3) + 2.0 * u * u * t),
        Algorithm::Wmmse => {
            if iterations == 0 {
                return Err(Error::invalid(
                    "WMMSE flop count needs at least one iteration",
                ));
            }
            iterations as f64
                * (14.0 / 3.0 * u * t.powi(3)
                    + 12.0 * u * u * t * t
                    + 12.0 * u * u * t
                    + 9.0 * u * t * t
                    + 8.0 * u * t
                    + 5.0 * u * u
                    + 68.0 / 3.0 * u)
        }
        Algorithm::Proposed => {
            (2f64.powi(19) + 2f64.powi(21)) * u + 2048.0 * u * u + 1024.0 * u * t
        }
    })
}

/// Rounds to `digits` significant figures.
pub fn round_significant(x: f64, digits: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(digits as i32 - 1 - magnitude);
    (x * factor).round() / factor
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub algorithm: Algorithm,
    pub n_users: usize,
    pub n_tx: usize,
    pub iterations: usize,
    pub flops: f64,
    /// Millions of FLOPs, three significant figures.
    pub display_millions: f64,
}

impl FlopReport {
    pub fn new(
        algorithm: Algorithm,
        n_users: usize,
        n_tx: usize,
        iterations: usize,
    ) -> Result<Self> {
        let flops = flop_count(algorithm, n_users, n_tx, iterations)?;
        Ok(Self {
            algorithm,
            n_users,
            n_tx,
            iterations,
            flops,
            display_millions: round_significant(flops / 1e6, 3),
        })
    }
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<9}{:>14.1}  ({}M)",
            self.algorithm.to_string(),
            self.flops,
            self.display_millions
        )
    }
}

/// One line of the forward-pass audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: String,
    pub flops: f64,
}

/// FLOPs of one forward pass of our own model for a single sample, counting
/// a multiply-add as two operations. Elementwise work is counted once per
/// output element and per nonlinearity.
pub fn forward_flop_audit(hyper: &ModelHyper) -> Vec<LayerFlops> {
    let d = hyper.embed_dim as f64;
    let f = hyper.ffn_dim as f64;
    let u = hyper.n_users as f64;
    let t = hyper.n_tx as f64;
    let s = u + 1.0;
    let mm = |rows: f64, inner: f64, cols: f64| 2.0 * rows * inner * cols;
    let norm = |rows: f64| 8.0 * rows * d;
    let mut out = vec![LayerFlops {
        layer: "embedding".into(),
        flops: mm(u, 2.0 * t, d) + u * d + mm(u, 2.0, d) + u * d + mm(1.0, u, d) + d,
    }];
    for l in 0..hyper.n_layers {
        let attention = norm(s)
            + 3.0 * (mm(s, d, d) + s * d)
            + 2.0 * mm(s, d, s)
            + 5.0 * s * s
            + mm(s, d, d)
            + s * d
            + s * d;
        let ffn = norm(s) + mm(s, d, f) + s * f + 8.0 * s * f + mm(s, f, d) + s * d + s * d;
        out.push(LayerFlops {
            layer: format!("block{l}.attention"),
            flops: attention,
        });
        out.push(LayerFlops {
            layer: format!("block{l}.ffn"),
            flops: ffn,
        });
    }
    out.push(LayerFlops {
        layer: "final_norm".into(),
        flops: norm(s),
    });
    let precoder = mm(u, d, 2.0 * t)
        + 2.0 * u * t
        + 4.0 * u * t
        + mm(u, d, 1.0)
        + 2.0 * u
        + 4.0 * u
        + 2.0 * u * t;
    let energy = s * d + mm(1.0, d, t + 1.0) + (t + 1.0) * 5.0;
    out.push(LayerFlops {
        layer: "precoder_head".into(),
        flops: precoder,
    });
    out.push(LayerFlops {
        layer: "energy_head".into(),
        flops: energy,
    });
    out
}

pub fn forward_flops(hyper: &ModelHyper) -> f64 {
    forward_flop_audit(hyper).iter().map(|l| l.flops).sum()
}
