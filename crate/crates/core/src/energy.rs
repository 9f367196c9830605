//! FLOPs per layer and the arithmetic-energy model: a conventional layer pays
//! a multiply and an add per FLOP, a spiking layer one accumulate per FLOP,
//! gated by its spike rate and repeated over the time steps.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::arch::{Architecture, ResolvedLayer};
use crate::error::{Error, Result};
use crate::snn::SpikeRecorder;

/// Per-operation energies in picojoules (32-bit, 45 nm).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyCosts {
    pub e_mult: f64,
    pub e_add: f64,
    pub e_ac: f64,
}

impl Default for EnergyCosts {
    fn default() -> Self {
        Self {
            e_mult: 3.1,
            e_add: 0.1,
            e_ac: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Bn,
    AvgPool,
    Fc,
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv" => Ok(LayerKind::Conv),
            "bn" => Ok(LayerKind::Bn),
            "ap" | "avgpool" | "pool" => Ok(LayerKind::AvgPool),
            "fc" | "dense" => Ok(LayerKind::Fc),
            other => Err(Error::InvalidArgument(format!("unknown layer kind `{other}`"))),
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv => "conv",
            LayerKind::Bn => "bn",
            LayerKind::AvgPool => "ap",
            LayerKind::Fc => "fc",
        })
    }
}

/// The dimensions that enter the FLOPs count of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerShape {
    Conv {
        kernel_size: u64,
        m_out: u64,
        c_in: u64,
        c_out: u64,
    },
    /// Normalization over `c_in` maps of side `m_in`; dense features use `m_in = 1`.
    Bn { c_in: u64, m_in: u64 },
    AvgPool { c_in: u64, m_in: u64 },
    Fc { n_in: u64, n_out: u64 },
}

impl LayerShape {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerShape::Conv { .. } => LayerKind::Conv,
            LayerShape::Bn { .. } => LayerKind::Bn,
            LayerShape::AvgPool { .. } => LayerKind::AvgPool,
            LayerShape::Fc { .. } => LayerKind::Fc,
        }
    }

    /// Builds a shape from a kind and its dimensions in the order
    /// conv `(ks, m_out, c_in, c_out)`, bn/ap `(c_in, m_in)`, fc `(n_in, n_out)`.
    pub fn from_parts(kind: &str, dims: &[u64]) -> Result<Self> {
        let kind: LayerKind = kind.parse()?;
        let want = if kind == LayerKind::Conv { 4 } else { 2 };
        if dims.len() != want {
            return Err(Error::InvalidArgument(format!("{kind} layers take {want} dimensions, got {}", dims.len())));
        }
        Ok(match kind {
            LayerKind::Conv => LayerShape::Conv {
                kernel_size: dims[0],
                m_out: dims[1],
                c_in: dims[2],
                c_out: dims[3],
            },
            LayerKind::Bn => LayerShape::Bn { c_in: dims[0], m_in: dims[1] },
            LayerKind::AvgPool => LayerShape::AvgPool { c_in: dims[0], m_in: dims[1] },
            LayerKind::Fc => LayerShape::Fc { n_in: dims[0], n_out: dims[1] },
        })
    }
}

/// `ks² · M_out² · C_in · C_out` for convolutions, `C_in · M_in²` for
/// normalization and pooling, `N_in · N_out` for fully connected layers.
pub fn flops_of_layer(shape: &LayerShape) -> u64 {
    match *shape {
        LayerShape::Conv {
            kernel_size,
            m_out,
            c_in,
            c_out,
        } => kernel_size * kernel_size * m_out * m_out * c_in * c_out,
        LayerShape::Bn { c_in, m_in } | LayerShape::AvgPool { c_in, m_in } => c_in * m_in * m_in,
        LayerShape::Fc { n_in, n_out } => n_in * n_out,
    }
}

pub fn energy_cnn(flops: u64, costs: &EnergyCosts) -> f64 {
    flops as f64 * (costs.e_mult + costs.e_add)
}

pub fn energy_snn(flops: u64, spike_rate: f64, time_steps: usize, costs: &EnergyCosts) -> Result<f64> {
    if !(spike_rate >= 0.0) {
        return Err(Error::InvalidArgument(format!("spike rate must be non-negative, got {spike_rate}")));
    }
    Ok(flops as f64 * spike_rate * time_steps as f64 * costs.e_ac)
}

/// A named layer in report order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDescriptor {
    pub name: String,
    pub shape: LayerShape,
}

/// Report rows for a layer stack: each weighted layer, then its normalization;
/// pooling layers in place. The head has no normalization.
pub fn describe(arch: &Architecture) -> Result<Vec<LayerDescriptor>> {
    let mut out = Vec::new();
    let mut push = |name: String, shape| out.push(LayerDescriptor { name, shape });
    for layer in arch.resolve()? {
        match &layer {
            ResolvedLayer::Conv { spec, out_side, .. } => {
                push(
                    layer.prefix(),
                    LayerShape::Conv {
                        kernel_size: spec.kernel_size as u64,
                        m_out: *out_side as u64,
                        c_in: spec.in_channels as u64,
                        c_out: spec.out_channels as u64,
                    },
                );
                push(
                    layer.bn_prefix().expect("normalized"),
                    LayerShape::Bn {
                        c_in: spec.out_channels as u64,
                        m_in: *out_side as u64,
                    },
                );
            }
            ResolvedLayer::AvgPool { channels, in_side, .. } => push(
                format!("ap{}", layer.prefix().trim_start_matches("pool")),
                LayerShape::AvgPool {
                    c_in: *channels as u64,
                    m_in: *in_side as u64,
                },
            ),
            ResolvedLayer::Dense {
                in_features,
                out_features,
                ..
            } => {
                push(
                    layer.prefix(),
                    LayerShape::Fc {
                        n_in: *in_features as u64,
                        n_out: *out_features as u64,
                    },
                );
                push(
                    layer.bn_prefix().expect("normalized"),
                    LayerShape::Bn {
                        c_in: *out_features as u64,
                        m_in: 1,
                    },
                );
            }
            ResolvedLayer::Head {
                in_features,
                out_features,
                ..
            } => push(
                layer.prefix(),
                LayerShape::Fc {
                    n_in: *in_features as u64,
                    n_out: *out_features as u64,
                },
            ),
        }
    }
    Ok(out)
}

/// Maps measured activity onto report rows: weighted layers take the
/// fraction of nonzero input events (a `-1` input counts), normalization rows
/// the firing rate of their block, pooling rows 1.
pub fn rates_from_recorder(layers: &[LayerDescriptor], recorder: &SpikeRecorder) -> Result<Vec<f64>> {
    let inputs = recorder.input_rates();
    let firing = recorder.firing_rates();
    let (mut wi, mut si) = (0, 0);
    let mut rates = Vec::with_capacity(layers.len());
    for layer in layers {
        let rate = match layer.shape.kind() {
            LayerKind::Conv | LayerKind::Fc => {
                wi += 1;
                inputs.get(wi - 1).copied()
            }
            LayerKind::Bn => {
                si += 1;
                firing.get(si - 1).copied()
            }
            LayerKind::AvgPool => Some(1.0),
        };
        rates.push(rate.ok_or_else(|| Error::InvalidArgument("recorder does not cover every layer".into()))?);
    }
    Ok(rates)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyRow {
    pub name: String,
    pub kind: LayerKind,
    pub flops: u64,
    pub spike_rate: Option<f64>,
    pub e_cnn_pj: f64,
    pub e_snn_pj: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyLedger {
    pub rows: Vec<EnergyRow>,
    pub time_steps: usize,
    pub total_flops: u64,
    pub total_cnn_pj: f64,
    /// `None` when no spike rates were supplied.
    pub total_snn_pj: Option<f64>,
}

impl EnergyLedger {
    /// CNN over SNN energy; `None` without spike rates or with zero SNN energy.
    pub fn ratio(&self) -> Option<f64> {
        self.total_snn_pj.filter(|&s| s > 0.0).map(|s| self.total_cnn_pj / s)
    }

    pub fn row(&self, name: &str) -> Option<&EnergyRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// `layer,flops,spike_rate,e_cnn_pj,e_snn_pj`, a `total` row and a `ratio` line.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>, prec: usize| v.map(|x| format!("{x:.prec$}")).unwrap_or_default();
        let mut out = String::from("layer,flops,spike_rate,e_cnn_pj,e_snn_pj\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{}",
                r.name,
                r.flops,
                opt(r.spike_rate, 6),
                r.e_cnn_pj,
                opt(r.e_snn_pj, 4)
            );
        }
        let _ = writeln!(
            out,
            "total,{},,{:.4},{}",
            self.total_flops,
            self.total_cnn_pj,
            opt(self.total_snn_pj, 4)
        );
        let _ = writeln!(out, "ratio,{}", opt(self.ratio(), 4));
        out
    }
}

/// One row per layer; `rates` (one per layer) enable the SNN column.
pub fn build_energy_report(
    layers: &[LayerDescriptor],
    rates: Option<&[f64]>,
    costs: &EnergyCosts,
    time_steps: usize,
) -> Result<EnergyLedger> {
    if let Some(r) = rates {
        if r.len() != layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} spike rates for {} layers",
                r.len(),
                layers.len()
            )));
        }
    }
    let mut rows = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let flops = flops_of_layer(&layer.shape);
        let rate = rates.map(|r| r[i]);
        rows.push(EnergyRow {
            name: layer.name.clone(),
            kind: layer.shape.kind(),
            flops,
            spike_rate: rate,
            e_cnn_pj: energy_cnn(flops, costs),
            e_snn_pj: rate.map(|r| energy_snn(flops, r, time_steps, costs)).transpose()?,
        });
    }
    Ok(EnergyLedger {
        total_flops: rows.iter().map(|r| r.flops).sum(),
        total_cnn_pj: rows.iter().map(|r| r.e_cnn_pj).sum(),
        total_snn_pj: rates.map(|_| rows.iter().filter_map(|r| r.e_snn_pj).sum()),
        rows,
        time_steps,
    })
}

/// A published per-layer row: CNN energy, SNN energy (pJ) and spike rate.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceRow {
    pub name: &'static str,
    pub e_cnn_pj: f64,
    pub e_snn_pj: f64,
    pub spike_rate: f64,
    /// Rows whose published FLOPs cannot come from the reference stack.
    pub exempt: bool,
}

/// Published per-layer energies for the reference stack at 28×28×3 input,
/// 62 classes, T = 10, in report order.
pub const REFERENCE_TABLE: [ReferenceRow; 11] = [
    ReferenceRow { name: "conv1", e_cnn_pj: 2_167_603.2, e_snn_pj: 203_212.8, spike_rate: 0.3, exempt: false },
    ReferenceRow { name: "bn1", e_cnn_pj: 80_281.6, e_snn_pj: 12_544.0, spike_rate: 0.5, exempt: false },
    ReferenceRow { name: "conv2", e_cnn_pj: 23_121_100.8, e_snn_pj: 2_528_870.4, spike_rate: 0.35, exempt: false },
    ReferenceRow { name: "bn2", e_cnn_pj: 80_281.6, e_snn_pj: 15_052.8, spike_rate: 0.6, exempt: false },
    ReferenceRow { name: "ap1", e_cnn_pj: 21_952.0, e_snn_pj: 6_860.0, spike_rate: 1.0, exempt: true },
    ReferenceRow { name: "conv3", e_cnn_pj: 11_560_550.4, e_snn_pj: 1_986_969.6, spike_rate: 0.55, exempt: false },
    ReferenceRow { name: "bn3", e_cnn_pj: 40_140.8, e_snn_pj: 5_017.6, spike_rate: 0.4, exempt: false },
    ReferenceRow { name: "ap2", e_cnn_pj: 10_579.2, e_snn_pj: 3_306.0, spike_rate: 1.0, exempt: true },
    ReferenceRow { name: "fc1", e_cnn_pj: 20_070.4, e_snn_pj: 3_763.2, spike_rate: 0.6, exempt: true },
    ReferenceRow { name: "bn4", e_cnn_pj: 409.6, e_snn_pj: 83.2, spike_rate: 0.65, exempt: false },
    ReferenceRow { name: "fc2", e_cnn_pj: 25_395.2, e_snn_pj: 7_936.0, spike_rate: 1.0, exempt: false },
];

/// Published totals in microjoules (CNN, SNN) and their ratio.
pub const REFERENCE_TOTALS_UJ: (f64, f64, f64) = (37.096, 4.773, 7.772);

pub fn reference_rates() -> Vec<f64> {
    REFERENCE_TABLE.iter().map(|r| r.spike_rate).collect()
}

/// Side-by-side listing of a ledger against the published rows.
pub fn compare_with_reference(ledger: &EnergyLedger) -> String {
    let mut out = format!(
        "{:<6} {:>16} {:>16} {:>14} {:>14}  note\n",
        "layer", "e_cnn_pj", "published", "e_snn_pj", "published"
    );
    for reference in &REFERENCE_TABLE {
        let Some(row) = ledger.row(reference.name) else {
            let _ = writeln!(out, "{:<6} (absent from this ledger)", reference.name);
            continue;
        };
        let snn = row.e_snn_pj.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
        let note = if reference.exempt {
            "exempt: published FLOPs do not fit the layer stack"
        } else if (row.e_cnn_pj - reference.e_cnn_pj).abs() <= 0.1
            && row.e_snn_pj.is_some_and(|v| (v - reference.e_snn_pj).abs() <= 0.1)
        {
            "match"
        } else {
            "differs"
        };
        let _ = writeln!(
            out,
            "{:<6} {:>16.1} {:>16.1} {:>14} {:>14.1}  {note}",
            reference.name, row.e_cnn_pj, reference.e_cnn_pj, snn, reference.e_snn_pj
        );
    }
    let (cnn, snn, ratio) = REFERENCE_TOTALS_UJ;
    let _ = writeln!(
        out,
        "total  {:.3} uJ CNN (published {cnn}), {} uJ SNN (published {snn}), ratio {} (published {ratio})",
        ledger.total_cnn_pj / 1e6,
        ledger.total_snn_pj.map(|v| format!("{:.3}", v / 1e6)).unwrap_or_else(|| "-".into()),
        ledger.ratio().map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
    );
    out
}
