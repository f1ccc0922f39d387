//! Closed-form tunable-parameter counts per fine-tuning method and the
//! FLOP cost formulas for the decomposition and a reference linear layer.
//! All arithmetic is exact integer arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{freeze_partition, SchemeVariant, TuningScheme};
use crate::model::{Layer, Model};

/// A layer, as the accounting formulas see it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Convolution with (c_in, c_out, k, k) filters.
    Conv { c_in: usize, c_out: usize, k: usize },
    /// The four attention projection matrices W_q, W_k, W_v, W_o, each (c, c).
    AttentionSet { c: usize },
    /// Dense linear layer (c_out, c_in).
    Linear { c_in: usize, c_out: usize },
}

/// Fine-tuning methods covered by the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Original,
    LoRA { r: usize },
    LoHa { r: usize },
    LoKr { r: usize },
    Oft { r: usize },
    /// Tuning the filter atoms D (conv) or block atoms D_c (linear /
    /// attention); `block` is the square block size k_c for non-conv layers.
    AtomsD { m: usize, block: usize },
    /// Tuning the overcomplete expansion (beta, D_1); falls back to
    /// `AtomsD` on non-conv layers.
    AtomsBeta { m: usize, m1: usize, block: usize },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Original => "Original".into(),
            Method::LoRA { r } => format!("LoRA(r={r})"),
            Method::LoHa { r } => format!("LoHa(r={r})"),
            Method::LoKr { r } => format!("LoKr(r={r})"),
            Method::Oft { r } => format!("OFT(r={r})"),
            Method::AtomsD { m, .. } => format!("Ours(D, m={m})"),
            Method::AtomsBeta { m, m1, .. } => format!("Ours(+beta, m={m}, m1={m1})"),
        }
    }
}

/// Tunable-parameter count of one layer under one method.
pub fn param_count(spec: LayerSpec, method: Method) -> Result<u64> {
    let out = match spec {
        LayerSpec::Conv { c_in, c_out, k } => {
            let (c_in, c_out, k) = (c_in as u64, c_out as u64, k as u64);
            match method {
                Method::Original => c_in * c_out * k * k,
                Method::LoRA { r } => (c_in + c_out) * k * r as u64,
                Method::LoHa { r } => 2 * (c_in + c_out) * k * r as u64,
                Method::LoKr { r } => c_in * k + c_out * k + (r as u64).pow(2),
                Method::Oft { r } => {
                    if r == 0 {
                        return Err(Error::InvalidArgument("OFT needs r >= 1".into()));
                    }
                    c_in * c_out * k * k / r as u64
                }
                Method::AtomsD { m, .. } => m as u64 * k * k,
                Method::AtomsBeta { m, m1, .. } => {
                    let (m, m1) = (m as u64, m1 as u64);
                    m * m1 * k * k + c_in * m * m1
                }
            }
        }
        LayerSpec::AttentionSet { c } => {
            let c = c as u64;
            match method {
                Method::Original => 4 * c * c,
                Method::LoRA { r } => 8 * c * r as u64,
                Method::LoHa { r } => 16 * c * r as u64,
                Method::LoKr { r } => 8 * c + 4 * (r as u64).pow(2),
                Method::Oft { r } => {
                    if r == 0 {
                        return Err(Error::InvalidArgument("OFT needs r >= 1".into()));
                    }
                    4 * c * c / r as u64 + 4 * c
                }
                Method::AtomsD { m, block } | Method::AtomsBeta { m, block, .. } => {
                    // linear layers always tune D_c: 4 * m * k_c^2
                    4 * m as u64 * (block as u64).pow(2)
                }
            }
        }
        LayerSpec::Linear { c_in, c_out } => {
            let (c_in, c_out) = (c_in as u64, c_out as u64);
            match method {
                Method::Original => c_in * c_out,
                Method::LoRA { r } => (c_in + c_out) * r as u64,
                Method::LoHa { r } => 2 * (c_in + c_out) * r as u64,
                Method::LoKr { r } => c_in + c_out + (r as u64).pow(2),
                Method::Oft { r } => {
                    if r == 0 {
                        return Err(Error::InvalidArgument("OFT needs r >= 1".into()));
                    }
                    c_in * c_out / r as u64
                }
                Method::AtomsD { m, block } | Method::AtomsBeta { m, block, .. } => {
                    m as u64 * (block as u64).pow(2)
                }
            }
        }
    };
    Ok(out)
}

/// FLOPs of K ISTA iterations of the decomposition of a (c', c) weight with
/// m atoms of flattened dimension k^2: K * (4*c'*c*m + c'*c + 6*m*k^2).
///
/// `k` here is the block (atom) side length of the rearranged layer, i.e.
/// sqrt of the flattened atom dimension, not a spatial kernel size.
pub fn decomposition_flops(c_in: usize, c_out: usize, k: usize, m: usize, iterations: usize) -> u64 {
    let (c1, c, k, m, kk) = (
        c_in as u64,
        c_out as u64,
        k as u64,
        m as u64,
        iterations as u64,
    );
    kk * (4 * c1 * c * m + c1 * c + 6 * m * k * k)
}

/// FLOPs of one training step of a dense linear layer (c', c) with batch
/// size `batch`: forward 2Bc'c + 2Bc, backward 4Bc'c + 2Bc, update c'c + c.
pub fn linear_flops(batch: usize, c_in: usize, c_out: usize) -> u64 {
    let (b, c1, c) = (batch as u64, c_in as u64, c_out as u64);
    6 * b * c1 * c + 4 * b * c + c1 * c + c
}

/// One row of the method-comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub per_layer: Vec<u64>,
    pub total: u64,
}

/// Evaluate every method formula over a list of layer specs; rows sorted by
/// ascending total count.
pub fn comparison_table(layers: &[LayerSpec], methods: &[Method]) -> Result<Vec<MethodRow>> {
    if methods.is_empty() {
        return Err(Error::InvalidArgument(
            "empty method list; pass at least one method".into(),
        ));
    }
    let mut rows = Vec::with_capacity(methods.len());
    for &m in methods {
        let per_layer: Vec<u64> = layers
            .iter()
            .map(|&spec| param_count(spec, m))
            .collect::<Result<_>>()?;
        let total = per_layer.iter().sum();
        rows.push(MethodRow {
            method: m.label(),
            per_layer,
            total,
        });
    }
    rows.sort_by_key(|r| r.total);
    Ok(rows)
}

/// Closed-form tunable count of one model layer under one scheme.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCount {
    pub index: usize,
    pub kind: String,
    pub tunable: u64,
}

/// Per-layer and total tunable counts of a model under a scheme, computed
/// from the closed-form formulas and cross-checked against the actual
/// frozen/tunable partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelReport {
    pub scheme: String,
    pub layers: Vec<LayerCount>,
    pub head: u64,
    pub total: u64,
}

fn layer_formula(layer: &Layer, scheme: &TuningScheme) -> u64 {
    let v = scheme.variant;
    let base: u64 = match (layer, v) {
        (_, SchemeVariant::LinearProbe) => 0,
        (Layer::Decomposed(l), SchemeVariant::AtomsOnly | SchemeVariant::AtomsPlusLinear) => {
            let k = l.atoms.kernel_size() as u64;
            l.atoms.num_atoms() as u64 * k * k
        }
        (
            Layer::Overcomplete(l),
            SchemeVariant::AtomsOnly | SchemeVariant::OvercompletePlusLinear,
        ) => {
            let k = l.over.kernel_size() as u64;
            let (m, m1) = (l.over.m as u64, l.over.m1 as u64);
            let beta = if l.over.per_channel {
                l.coeffs.in_channels() as u64 * m * m1
            } else {
                m * m1
            };
            m * m1 * k * k + beta
        }
        (
            Layer::Kron { factors, .. },
            SchemeVariant::AtomsPlusLinear | SchemeVariant::OvercompletePlusLinear,
        ) => (factors.num_pairs() * factors.k_rows * factors.k_cols) as u64,
        (Layer::Conv { weight, lora: Some(_), .. }, SchemeVariant::LoRABaseline { r }) => {
            let (c_out, c_in, k) = (
                weight.shape()[0] as u64,
                weight.shape()[1] as u64,
                weight.shape()[2] as u64,
            );
            (c_out + c_in) * k * r as u64
        }
        (_, SchemeVariant::FullFinetune) => match layer {
            Layer::Conv { weight, lora, .. } => {
                weight.len() as u64
                    + lora
                        .as_ref()
                        .map_or(0, |a| a.w_down.len() + a.w_up.len()) as u64
            }
            Layer::Decomposed(l) => l.atoms.tensor.len() as u64,
            Layer::Overcomplete(l) => (l.over.beta.len() + l.over.d1.len()) as u64,
            Layer::Kron { factors, .. } => factors.b.len() as u64,
            Layer::Norm { .. } | Layer::Relu | Layer::GlobalAvgPool => 0,
        },
        _ => 0,
    };
    let mut extra = 0u64;
    let tune_bias = scheme.tune_bias || v == SchemeVariant::FullFinetune;
    let tune_norm = scheme.tune_norm || v == SchemeVariant::FullFinetune;
    match layer {
        Layer::Conv { bias, .. } | Layer::Kron { bias, .. } if tune_bias => {
            extra += bias.len() as u64;
        }
        Layer::Decomposed(l) if tune_bias => {
            extra += l.bias.as_ref().map_or(0, |b| b.len()) as u64;
        }
        Layer::Overcomplete(l) if tune_bias => {
            extra += l.bias.as_ref().map_or(0, |b| b.len()) as u64;
        }
        Layer::Norm { gain, bias, .. } if tune_norm => {
            extra += (gain.len() + bias.len()) as u64;
        }
        _ => {}
    }
    base + extra
}

/// Evaluate the closed-form per-layer counts for a model under a scheme and
/// cross-check the total against [`freeze_partition`]; disagreement is a
/// hard error, not a warning.
pub fn model_report(model: &Model, scheme: &TuningScheme) -> Result<ModelReport> {
    let partition = freeze_partition(model, scheme)?;
    let mut layers = Vec::new();
    let mut total = 0u64;
    for (index, layer) in model.layers.iter().enumerate() {
        let tunable = layer_formula(layer, scheme);
        total += tunable;
        layers.push(LayerCount {
            index,
            kind: layer.kind().into(),
            tunable,
        });
    }
    let head = (model.head_w.len() + model.head_b.len()) as u64;
    total += head;
    let actual = partition.tunable_count() as u64;
    if actual != total {
        return Err(Error::AccountingMismatch(format!(
            "formula total {total} != partition total {actual} under {}",
            scheme.variant.name()
        )));
    }
    Ok(ModelReport {
        scheme: scheme.variant.name(),
        layers,
        head,
        total,
    })
}

/// Map a model's weight-bearing layers onto accounting specs, for the
/// all-methods comparison table.
pub fn model_layer_specs(model: &Model) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for layer in &model.layers {
        match layer {
            Layer::Conv { weight, .. } => {
                let (c_out, c_in, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                if k == 1 {
                    specs.push(LayerSpec::Linear { c_in, c_out });
                } else {
                    specs.push(LayerSpec::Conv { c_in, c_out, k });
                }
            }
            Layer::Decomposed(l) => specs.push(LayerSpec::Conv {
                c_in: l.in_channels(),
                c_out: l.out_channels(),
                k: l.atoms.kernel_size(),
            }),
            Layer::Overcomplete(l) => specs.push(LayerSpec::Conv {
                c_in: l.coeffs.in_channels(),
                c_out: l.coeffs.out_channels(),
                k: l.over.kernel_size(),
            }),
            Layer::Kron { factors, .. } => specs.push(LayerSpec::Linear {
                c_in: factors.in_features(),
                c_out: factors.out_features(),
            }),
            Layer::Norm { .. } | Layer::Relu | Layer::GlobalAvgPool => {}
        }
    }
    specs
}

/// Render a comparison table as aligned plain text.
pub fn render_table(layers: &[LayerSpec], rows: &[MethodRow]) -> String {
    let mut header = vec!["method".to_string()];
    for (i, l) in layers.iter().enumerate() {
        let tag = match l {
            LayerSpec::Conv { c_in, c_out, k } => format!("conv{i}({c_in}x{c_out}x{k}x{k})"),
            LayerSpec::AttentionSet { c } => format!("attn{i}(c={c})"),
            LayerSpec::Linear { c_in, c_out } => format!("linear{i}({c_out}x{c_in})"),
        };
        header.push(tag);
    }
    header.push("total".to_string());
    let mut cells: Vec<Vec<String>> = vec![header];
    for r in rows {
        let mut row = vec![r.method.clone()];
        row.extend(r.per_layer.iter().map(|v| v.to_string()));
        row.push(r.total.to_string());
        cells.push(row);
    }
    let ncols = cells[0].len();
    let widths: Vec<usize> = (0..ncols)
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            out.push_str(&format!("{:>width$}", cell, width = widths[c]));
        }
        out.push('\n');
    }
    out
}
