//! Per-head diagnostics of attention weights stored in a tensor archive:
//! spectra of `W_KᵀW_Q` and `P·W_V`, row-norm balance pairs, and nuclear vs
//! half-Frobenius-sum pairs.

mod archive;

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use archive::{load_tensor_archive, Dtype, TensorArchive, TensorEntry};

use crate::error::{Error, Result};
use crate::harness::fmt_f64;
use crate::matrix::Matrix;
use crate::spectra::{product_singular_values, report_from_values, SpectrumReport};

/// Where and how the attention projections are stored.
///
/// Templates may contain `{layer}` and `{head}`. A template without `{head}`
/// names a tensor holding all heads as contiguous row blocks of `d_head`
/// rows (for `o`, column blocks). With `fused_qkv`, the `q` template names a
/// single tensor holding the q heads, then the k heads, then the v heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionLayout {
    pub q: String,
    #[serde(default)]
    pub k: String,
    #[serde(default)]
    pub v: String,
    pub o: String,
    pub d_model: usize,
    pub d_head: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub fused_qkv: bool,
    /// Stored matrices are the transposes of `W ∈ R^{d_head×d_model}` and
    /// `P ∈ R^{d_model×d_head}`.
    #[serde(default)]
    pub transposed: bool,
    /// Probed from the archive when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<usize>,
}

fn fill(template: &str, layer: usize, head: usize) -> String {
    template
        .replace("{layer}", &layer.to_string())
        .replace("{head}", &head.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Q,
    K,
    V,
}

impl AttentionLayout {
    pub fn from_json(text: &str) -> Result<Self> {
        let layout: Self = serde_json::from_str(text).map_err(|e| Error::config("layout", e.to_string()))?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_head == 0 || self.n_heads == 0 {
            return Err(Error::config("layout", "d_model, d_head and n_heads must be positive"));
        }
        if !self.fused_qkv && (self.k.is_empty() || self.v.is_empty()) {
            return Err(Error::config("layout.k", "k and v templates are required unless fused_qkv"));
        }
        if self.fused_qkv && self.q.contains("{head}") {
            return Err(Error::config("layout.q", "a fused qkv tensor cannot be per head"));
        }
        Ok(())
    }

    /// Number of layers, counting consecutive layers whose q tensor exists
    /// when `n_layers` is not given.
    pub fn layers(&self, archive: &TensorArchive) -> usize {
        self.n_layers
            .unwrap_or_else(|| (0..).take_while(|&l| archive.contains(&fill(&self.q, l, 0))).count())
    }

    fn oriented(&self, archive: &TensorArchive, name: &str) -> Result<Matrix<f64>> {
        let m = archive.matrix(name)?;
        Ok(if self.transposed { m.transpose() } else { m })
    }

    /// `W ∈ R^{d_head×d_model}` for one projection of one head.
    fn projection(&self, archive: &TensorArchive, role: Role, layer: usize, head: usize) -> Result<Matrix<f64>> {
        let (template, block) = match (self.fused_qkv, role) {
            (true, Role::Q) => (&self.q, head),
            (true, Role::K) => (&self.q, self.n_heads + head),
            (true, Role::V) => (&self.q, 2 * self.n_heads + head),
            (false, Role::Q) => (&self.q, head),
            (false, Role::K) => (&self.k, head),
            (false, Role::V) => (&self.v, head),
        };
        let name = fill(template, layer, head);
        let m = self.oriented(archive, &name)?;
        let dims_err = |reason: String| Error::TensorDims {
            name: name.clone(),
            reason,
        };
        if m.cols() != self.d_model {
            return Err(dims_err(format!("expected {} columns (d_model), got {}", self.d_model, m.cols())));
        }
        if template.contains("{head}") {
            if m.rows() != self.d_head {
                return Err(dims_err(format!("expected {} rows (d_head), got {}", self.d_head, m.rows())));
            }
            return Ok(m);
        }
        let blocks = if self.fused_qkv { 3 * self.n_heads } else { self.n_heads };
        if m.rows() != blocks * self.d_head {
            return Err(dims_err(format!(
                "expected {} rows ({blocks} blocks of d_head), got {}",
                blocks * self.d_head,
                m.rows()
            )));
        }
        Ok(m.row_block(block * self.d_head, (block + 1) * self.d_head))
    }

    /// `P ∈ R^{d_model×d_head}` for one head.
    fn output(&self, archive: &TensorArchive, layer: usize, head: usize) -> Result<Matrix<f64>> {
        let name = fill(&self.o, layer, head);
        let m = self.oriented(archive, &name)?;
        let dims_err = |reason: String| Error::TensorDims {
            name: name.clone(),
            reason,
        };
        if m.rows() != self.d_model {
            return Err(dims_err(format!("expected {} rows (d_model), got {}", self.d_model, m.rows())));
        }
        if self.o.contains("{head}") {
            if m.cols() != self.d_head {
                return Err(dims_err(format!("expected {} columns (d_head), got {}", self.d_head, m.cols())));
            }
            return Ok(m);
        }
        if m.cols() != self.n_heads * self.d_head {
            return Err(dims_err(format!(
                "expected {} columns (n_heads·d_head), got {}",
                self.n_heads * self.d_head,
                m.cols()
            )));
        }
        Ok(m.col_block(head * self.d_head, (head + 1) * self.d_head))
    }
}

/// `½(‖X‖² + ‖Y‖²)` against `‖XYᵀ‖_*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormPair {
    pub frobenius_half_sum: f64,
    pub nuclear: f64,
}

impl NormPair {
    pub fn gap(&self) -> f64 {
        (self.frobenius_half_sum - self.nuclear).abs()
    }

    pub fn relative_gap(&self) -> f64 {
        if self.frobenius_half_sum == 0.0 {
            0.0
        } else {
            self.gap() / self.frobenius_half_sum
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadReport {
    pub layer: usize,
    pub head: usize,
    /// Spectrum of `W_KᵀW_Q` (d_model values).
    pub qk: SpectrumReport<f64>,
    /// Spectrum of `P·W_V` (d_model values).
    pub vp: SpectrumReport<f64>,
    /// `(‖row_i(W_Q)‖², ‖row_i(W_K)‖²)` for each of the d_head rows.
    pub qk_row_pairs: Vec<(f64, f64)>,
    /// `(‖row_i(W_V)‖², ‖col_i(P)‖²)` for each of the d_head rows.
    pub vp_row_pairs: Vec<(f64, f64)>,
    pub qk_norms: NormPair,
    pub vp_norms: NormPair,
}

/// Mean of `|x − y| / ((x + y)/2)` over the pairs; pairs with `x = y = 0`
/// count as zero.
pub fn mean_relative_deviation(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(x, y)| {
            let m = 0.5 * (x + y);
            if m == 0.0 {
                0.0
            } else {
                (x - y).abs() / m
            }
        })
        .sum();
    sum / pairs.len() as f64
}

impl HeadReport {
    pub fn qk_row_deviation(&self) -> f64 {
        mean_relative_deviation(&self.qk_row_pairs)
    }

    pub fn vp_row_deviation(&self) -> f64 {
        mean_relative_deviation(&self.vp_row_pairs)
    }
}

fn row_sq(m: &Matrix<f64>) -> Vec<f64> {
    (0..m.rows()).map(|i| m.row(i).iter().map(|x| x * x).sum()).collect()
}

fn pair(x: &Matrix<f64>, y: &Matrix<f64>, threshold: f64) -> Result<(SpectrumReport<f64>, NormPair)> {
    let s = product_singular_values(x, y)?;
    let report = report_from_values(s, threshold)?;
    let norms = NormPair {
        frobenius_half_sum: 0.5 * (x.frobenius_sq() + y.frobenius_sq()),
        nuclear: report.nuclear,
    };
    Ok((report, norms))
}

pub fn attention_products(
    archive: &TensorArchive,
    layout: &AttentionLayout,
    layer: usize,
    head: usize,
    threshold: f64,
) -> Result<HeadReport> {
    let wq = layout.projection(archive, Role::Q, layer, head)?;
    let wk = layout.projection(archive, Role::K, layer, head)?;
    let wv = layout.projection(archive, Role::V, layer, head)?;
    let p = layout.output(archive, layer, head)?;

    // W_KᵀW_Q = X·Yᵀ with X = W_Kᵀ, Y = W_Qᵀ
    let (qk, qk_norms) = pair(&wk.transpose(), &wq.transpose(), threshold)?;
    // P·W_V = X·Yᵀ with X = P, Y = W_Vᵀ
    let (vp, vp_norms) = pair(&p, &wv.transpose(), threshold)?;

    let qk_row_pairs = row_sq(&wq).into_iter().zip(row_sq(&wk)).collect();
    let vp_row_pairs = row_sq(&wv).into_iter().zip(row_sq(&p.transpose())).collect();
    Ok(HeadReport {
        layer,
        head,
        qk,
        vp,
        qk_row_pairs,
        vp_row_pairs,
        qk_norms,
        vp_norms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointReport {
    pub threshold: f64,
    /// Ordered by (layer, head).
    pub heads: Vec<HeadReport>,
}

/// Analyzes every head of every layer. Heads run on the rayon pool; the
/// result order is (layer, head) regardless of scheduling.
pub fn analyze_checkpoint(archive: &TensorArchive, layout: &AttentionLayout, threshold: f64) -> Result<CheckpointReport> {
    layout.validate()?;
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::config("threshold", "must lie in (0, 1]"));
    }
    let n_layers = layout.layers(archive);
    if n_layers == 0 {
        return Err(Error::MissingTensor(fill(&layout.q, 0, 0)));
    }
    let cells: Vec<(usize, usize)> = (0..n_layers)
        .flat_map(|l| (0..layout.n_heads).map(move |h| (l, h)))
        .collect();
    let heads = cells
        .par_iter()
        .map(|&(l, h)| attention_products(archive, layout, l, h, threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckpointReport { threshold, heads })
}

impl CheckpointReport {
    pub fn heads_csv(&self) -> String {
        let mut out = String::from(
            "layer,head,pseudo_rank_qk,pseudo_rank_vp,nuclear_qk,frobenius_half_sum_qk,\
             nuclear_vp,frobenius_half_sum_vp,row_norm_dev_qk,row_norm_dev_vp\n",
        );
        for h in &self.heads {
            let vals = [
                h.qk.pseudo_rank,
                h.vp.pseudo_rank,
                h.qk_norms.nuclear,
                h.qk_norms.frobenius_half_sum,
                h.vp_norms.nuclear,
                h.vp_norms.frobenius_half_sum,
                h.qk_row_deviation(),
                h.vp_row_deviation(),
            ];
            write!(out, "{},{}", h.layer, h.head).unwrap();
            for v in vals {
                out.push(',');
                out.push_str(&fmt_f64(v));
            }
            out.push('\n');
        }
        out
    }

    fn scatter_csv(&self, header: &str, pick: impl Fn(&HeadReport) -> &[(f64, f64)]) -> String {
        let mut out = format!("layer,head,index,{header}\n");
        for h in &self.heads {
            for (i, &(x, y)) in pick(h).iter().enumerate() {
                writeln!(out, "{},{},{i},{},{}", h.layer, h.head, fmt_f64(x), fmt_f64(y)).unwrap();
            }
        }
        out
    }

    pub fn scatter_qk_csv(&self) -> String {
        self.scatter_csv("wq_row_sq,wk_row_sq", |h| &h.qk_row_pairs)
    }

    pub fn scatter_vp_csv(&self) -> String {
        self.scatter_csv("wv_row_sq,p_col_sq", |h| &h.vp_row_pairs)
    }

    pub fn norms_csv(&self) -> String {
        let mut out = String::from("layer,head,nuclear_qk,frobenius_half_sum_qk,nuclear_vp,frobenius_half_sum_vp\n");
        for h in &self.heads {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                h.layer,
                h.head,
                fmt_f64(h.qk_norms.nuclear),
                fmt_f64(h.qk_norms.frobenius_half_sum),
                fmt_f64(h.vp_norms.nuclear),
                fmt_f64(h.vp_norms.frobenius_half_sum)
            )
            .unwrap();
        }
        out
    }

    /// Writes `heads.csv`, `scatter_qk.csv`, `scatter_vp.csv` and `norms.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("heads.csv", self.heads_csv()),
            ("scatter_qk.csv", self.scatter_qk_csv()),
            ("scatter_vp.csv", self.scatter_vp_csv()),
            ("norms.csv", self.norms_csv()),
        ];
        for (name, text) in files {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
