//! Multi-head self-attention with global and local (masked) maps, and the two
//! gated fusions of the two: gating the attention maps (`GateAtt`) and gating
//! the projected head outputs (`GateOp`). Forward passes cache what the
//! analytic backward needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::tensor::{masked_row_softmax, matmul, matmul_nt, matmul_tn, sigmoid, softmax_backward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    ShareAtt,
    GateAtt,
    GateOp,
    /// Every head uses the same local mask; no global map.
    Local,
}

impl Mode {
    /// The global/local variants.
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::ShareAtt, Mode::GateAtt, Mode::GateOp];
    pub const WITH_LOCAL: [Mode; 5] = [Mode::Baseline, Mode::ShareAtt, Mode::GateAtt, Mode::GateOp, Mode::Local];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::ShareAtt => "shareatt",
            Mode::GateAtt => "gateatt",
            Mode::GateOp => "gateop",
            Mode::Local => "local",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::WITH_LOCAL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config("variant", format!("unknown variant {s:?}")))
    }
}

/// Which heads see which maps.
///
/// `ShareAtt` splits the heads: the first `M/2` use the global map and head
/// `M/2 + k` uses `local_masks[k]`. `GateAtt` and `GateOp` compute both maps in
/// every head with a single shared local mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantConfig {
    pub mode: Mode,
    pub local_masks: Vec<AttentionMask>,
}

impl VariantConfig {
    pub fn baseline() -> Self {
        VariantConfig {
            mode: Mode::Baseline,
            local_masks: Vec::new(),
        }
    }

    pub fn share_att(local_masks: Vec<AttentionMask>) -> Self {
        VariantConfig {
            mode: Mode::ShareAtt,
            local_masks,
        }
    }

    pub fn gate_att(mask: AttentionMask) -> Self {
        VariantConfig {
            mode: Mode::GateAtt,
            local_masks: vec![mask],
        }
    }

    pub fn gate_op(mask: AttentionMask) -> Self {
        VariantConfig {
            mode: Mode::GateOp,
            local_masks: vec![mask],
        }
    }

    pub fn local(mask: AttentionMask) -> Self {
        VariantConfig {
            mode: Mode::Local,
            local_masks: vec![mask],
        }
    }

    pub fn validate(&self, heads: usize, size: usize) -> Result<()> {
        let expected = match self.mode {
            Mode::Baseline => 0,
            Mode::ShareAtt => {
                if heads % 2 != 0 {
                    return Err(Error::config("heads", "ShareAtt needs an even head count"));
                }
                heads / 2
            }
            Mode::GateAtt | Mode::GateOp | Mode::Local => 1,
        };
        if self.local_masks.len() != expected {
            return Err(Error::config(
                "local_masks",
                format!(
                    "{} expects {expected} local mask(s) for {heads} heads, got {}",
                    self.mode.name(),
                    self.local_masks.len()
                ),
            ));
        }
        if let Some(m) = self.local_masks.iter().find(|m| m.size() != size) {
            return Err(Error::config(
                "local_masks",
                format!("mask size {} does not match sequence length {size}", m.size()),
            ));
        }
        Ok(())
    }

    /// Local mask used by head `m`, or `None` for a global head. For the gated
    /// modes this is the local branch's mask.
    pub fn head_mask(&self, heads: usize, m: usize) -> Option<&AttentionMask> {
        match self.mode {
            Mode::Baseline => None,
            Mode::ShareAtt => m.checked_sub(heads / 2).map(|k| &self.local_masks[k]),
            Mode::GateAtt | Mode::GateOp | Mode::Local => self.local_masks.first(),
        }
    }
}

/// Per-head query/key/value projections and the output projection.
///
/// `w_o` is absent in `GateOp`, whose two branch projections live in
/// [`GateOpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MhsaParams {
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    pub w_o: Option<Tensor>,
}

impl MhsaParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, with_output: bool, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(
                "heads",
                format!("model dim {dim} not divisible by {heads} heads"),
            ));
        }
        let dh = dim / heads;
        let mut w_q = Vec::with_capacity(heads);
        let mut w_k = Vec::with_capacity(heads);
        let mut w_v = Vec::with_capacity(heads);
        for _ in 0..heads {
            w_q.push(Tensor::glorot(dim, dh, rng));
            w_k.push(Tensor::glorot(dim, dh, rng));
            w_v.push(Tensor::glorot(dim, dh, rng));
        }
        let w_o = with_output.then(|| Tensor::glorot(dim, dim, rng));
        Ok(MhsaParams { w_q, w_k, w_v, w_o })
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn dim(&self) -> usize {
        self.w_q[0].rows()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q[0].cols()
    }

    fn zeros_like(&self) -> Self {
        let z = |v: &Vec<Tensor>| v.iter().map(|t| Tensor::zeros(t.shape())).collect();
        MhsaParams {
            w_q: z(&self.w_q),
            w_k: z(&self.w_k),
            w_v: z(&self.w_v),
            w_o: self.w_o.as_ref().map(|t| Tensor::zeros(t.shape())),
        }
    }
}

/// `T x T` gate weights shared by all heads; ties the layer to one sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct GateAttParams {
    pub w_global: Tensor,
    pub w_local: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOpParams {
    pub w_out_global: Tensor,
    pub w_out_local: Tensor,
    pub w_gate_global: Tensor,
    pub w_gate_local: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateParams {
    None,
    Att(GateAttParams),
    Op(GateOpParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub mhsa: MhsaParams,
    pub gate: GateParams,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, size: usize, mode: Mode, rng: &mut R) -> Result<Self> {
        let mhsa = MhsaParams::init(dim, heads, mode != Mode::GateOp, rng)?;
        let gate = match mode {
            Mode::Baseline | Mode::ShareAtt | Mode::Local => GateParams::None,
            Mode::GateAtt => GateParams::Att(GateAttParams {
                w_global: Tensor::glorot(size, size, rng),
                w_local: Tensor::glorot(size, size, rng),
            }),
            Mode::GateOp => GateParams::Op(GateOpParams {
                w_out_global: Tensor::glorot(dim, dim, rng),
                w_out_local: Tensor::glorot(dim, dim, rng),
                w_gate_global: Tensor::glorot(dim, dim, rng),
                w_gate_local: Tensor::glorot(dim, dim, rng),
            }),
        };
        Ok(AttentionParams { mhsa, gate })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        let gate = match &self.gate {
            GateParams::None => GateParams::None,
            GateParams::Att(g) => GateParams::Att(GateAttParams {
                w_global: z(&g.w_global),
                w_local: z(&g.w_local),
            }),
            GateParams::Op(g) => GateParams::Op(GateOpParams {
                w_out_global: z(&g.w_out_global),
                w_out_local: z(&g.w_out_local),
                w_gate_global: z(&g.w_gate_global),
                w_gate_local: z(&g.w_gate_local),
            }),
        };
        AttentionParams {
            mhsa: self.mhsa.zeros_like(),
            gate,
        }
    }

    /// Parameters in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (m, ((q, k), v)) in self
            .mhsa
            .w_q
            .iter()
            .zip(&self.mhsa.w_k)
            .zip(&self.mhsa.w_v)
            .enumerate()
        {
            out.push((format!("head{m}.w_q"), q));
            out.push((format!("head{m}.w_k"), k));
            out.push((format!("head{m}.w_v"), v));
        }
        if let Some(w_o) = &self.mhsa.w_o {
            out.push(("w_o".to_string(), w_o));
        }
        match &self.gate {
            GateParams::None => {}
            GateParams::Att(g) => {
                out.push(("gate_att.w_global".to_string(), &g.w_global));
                out.push(("gate_att.w_local".to_string(), &g.w_local));
            }
            GateParams::Op(g) => {
                out.push(("gate_op.w_out_global".to_string(), &g.w_out_global));
                out.push(("gate_op.w_out_local".to_string(), &g.w_out_local));
                out.push(("gate_op.w_gate_global".to_string(), &g.w_gate_global));
                out.push(("gate_op.w_gate_local".to_string(), &g.w_gate_local));
            }
        }
        out
    }

    /// Same order as [`AttentionParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for ((q, k), v) in self
            .mhsa
            .w_q
            .iter_mut()
            .zip(self.mhsa.w_k.iter_mut())
            .zip(self.mhsa.w_v.iter_mut())
        {
            out.push(q);
            out.push(k);
            out.push(v);
        }
        if let Some(w_o) = self.mhsa.w_o.as_mut() {
            out.push(w_o);
        }
        match &mut self.gate {
            GateParams::None => {}
            GateParams::Att(g) => {
                out.push(&mut g.w_global);
                out.push(&mut g.w_local);
            }
            GateParams::Op(g) => {
                out.push(&mut g.w_out_global);
                out.push(&mut g.w_out_local);
                out.push(&mut g.w_gate_global);
                out.push(&mut g.w_gate_local);
            }
        }
        out
    }
}

/// `(Q_m, K_m, V_m) = (X W_q_m, X W_k_m, X W_v_m)`.
pub fn project_qkv(x: &Tensor, params: &MhsaParams, m: usize) -> Result<(Tensor, Tensor, Tensor)> {
    if m >= params.heads() {
        return Err(Error::OutOfRange {
            index: m,
            len: params.heads(),
        });
    }
    Ok((
        matmul(x, &params.w_q[m])?,
        matmul(x, &params.w_k[m])?,
        matmul(x, &params.w_v[m])?,
    ))
}

/// Row-stochastic map `softmax(Q Kᵀ / sqrt(d_head))`, restricted to the kept
/// entries of `mask` when one is given.
pub fn attention_map(q: &Tensor, k: &Tensor, mask: Option<&AttentionMask>) -> Result<Tensor> {
    if q.shape() != k.shape() {
        return Err(Error::shape(
            "attention_map",
            format!("Q {:?} vs K {:?}", q.shape(), k.shape()),
        ));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let logits = matmul_nt(q, k)?.scale(scale);
    masked_row_softmax(&logits, mask)
}

/// `O_m = A_m V_m`.
pub fn head_output(a: &Tensor, v: &Tensor) -> Result<Tensor> {
    matmul(a, v)
}

/// Elementwise two-way softmax gate: returns `R_g = σ(z_g - z_l)`; `R_l = 1 - R_g`.
fn pair_gate(z_g: &Tensor, z_l: &Tensor) -> Tensor {
    let mut r = z_g.clone();
    for (r, l) in r.data_mut().iter_mut().zip(z_l.data()) {
        *r = sigmoid(*r - l);
    }
    r
}

fn convex(r_g: &Tensor, a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for ((o, &r), &bv) in out.data_mut().iter_mut().zip(r_g.data()).zip(b.data()) {
        *o = bv + r * (*o - bv);
    }
    out
}

/// Fuses a global and a local attention map with a learned elementwise gate:
/// `R_g, R_l = softmax([A_g W_g, A_l W_l])` over the pair, then
/// `A = R_g ⊙ A_g + R_l ⊙ A_l`.
pub fn gate_attention_maps(a_g: &Tensor, a_l: &Tensor, params: &GateAttParams) -> Result<Tensor> {
    Ok(gate_attention_maps_with_gate(a_g, a_l, params)?.0)
}

fn gate_attention_maps_with_gate(
    a_g: &Tensor,
    a_l: &Tensor,
    params: &GateAttParams,
) -> Result<(Tensor, Tensor)> {
    if a_g.shape() != a_l.shape() {
        return Err(Error::shape(
            "gate_attention_maps",
            format!("{:?} vs {:?}", a_g.shape(), a_l.shape()),
        ));
    }
    let z_g = matmul(a_g, &params.w_global)?;
    let z_l = matmul(a_l, &params.w_local)?;
    let r_g = pair_gate(&z_g, &z_l);
    Ok((convex(&r_g, a_g, a_l), r_g))
}

/// Divides each row by its sum.
fn renormalize_rows(a: &Tensor) -> (Tensor, Vec<f64>) {
    let sums = a.row_sums();
    let mut out = a.clone();
    for (i, s) in sums.iter().enumerate() {
        for v in out.row_mut(i) {
            *v /= s;
        }
    }
    (out, sums)
}

/// Gated fusion of the global and local contextual representations.
///
/// `O_g`/`O_l` concatenate `A_g_m V_m` / `A_l_m V_m` over heads, are projected
/// by `W_og`/`W_ol`, and mixed by the elementwise gate
/// `softmax([O_g W_gg, O_l W_lg])`.
pub fn gate_outputs(
    a_g_heads: &[Tensor],
    a_l_heads: &[Tensor],
    v_heads: &[Tensor],
    params: &GateOpParams,
) -> Result<Tensor> {
    Ok(gate_outputs_cached(a_g_heads, a_l_heads, v_heads, params)?.y)
}

struct GateOpForward {
    o_g: Tensor,
    o_l: Tensor,
    y_g: Tensor,
    y_l: Tensor,
    r_g: Tensor,
    y: Tensor,
}

fn gate_outputs_cached(
    a_g_heads: &[Tensor],
    a_l_heads: &[Tensor],
    v_heads: &[Tensor],
    params: &GateOpParams,
) -> Result<GateOpForward> {
    if a_g_heads.len() != v_heads.len() || a_l_heads.len() != v_heads.len() {
        return Err(Error::shape(
            "gate_outputs",
            format!(
                "{} global maps, {} local maps, {} value blocks",
                a_g_heads.len(),
                a_l_heads.len(),
                v_heads.len()
            ),
        ));
    }
    let o_g = Tensor::hconcat(
        &a_g_heads
            .iter()
            .zip(v_heads)
            .map(|(a, v)| head_output(a, v))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let o_l = Tensor::hconcat(
        &a_l_heads
            .iter()
            .zip(v_heads)
            .map(|(a, v)| head_output(a, v))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let y_g = matmul(&o_g, &params.w_out_global)?;
    let y_l = matmul(&o_l, &params.w_out_local)?;
    let r_g = pair_gate(
        &matmul(&o_g, &params.w_gate_global)?,
        &matmul(&o_l, &params.w_gate_local)?,
    );
    let y = convex(&r_g, &y_g, &y_l);
    Ok(GateOpForward {
        o_g,
        o_l,
        y_g,
        y_l,
        r_g,
        y,
    })
}

/// Plain multi-head self-attention for `Baseline`, `ShareAtt` and `Local`: per-head maps
/// (global or local per `cfg`), head outputs concatenated and projected by `W_o`.
/// Returns the output and every head's map.
pub fn mhsa_forward(x: &Tensor, params: &MhsaParams, cfg: &VariantConfig) -> Result<(Tensor, Vec<Tensor>)> {
    if !matches!(cfg.mode, Mode::Baseline | Mode::ShareAtt | Mode::Local) {
        return Err(Error::config(
            "variant",
            "mhsa_forward handles the ungated variants; use AttentionLayer for gated ones",
        ));
    }
    let layer = AttentionLayer {
        params: AttentionParams {
            mhsa: params.clone(),
            gate: GateParams::None,
        },
        variant: cfg.clone(),
        renormalize_gate: false,
    };
    let (y, cache) = layer.forward(x, x.rows())?;
    let maps = cache.heads.into_iter().map(|h| h.map).collect();
    Ok((y, maps))
}

#[derive(Debug, Clone)]
struct HeadCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// The map actually multiplied with `V` (global, local, or fused).
    map: Tensor,
    global: Option<Tensor>,
    local: Option<Tensor>,
    gate: Option<Tensor>,
    /// Pre-normalization fused map and row sums, when renormalizing.
    unnormalized: Option<(Tensor, Vec<f64>)>,
}

/// Intermediates of one [`AttentionLayer::forward`] call.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Tensor,
    heads: Vec<HeadCache>,
    concat: Option<Tensor>,
    gate_op: Option<GateOpCache>,
}

#[derive(Debug, Clone)]
struct GateOpCache {
    o_g: Tensor,
    o_l: Tensor,
    y_g: Tensor,
    y_l: Tensor,
    r_g: Tensor,
}

/// Per-head maps recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct HeadMaps {
    /// Map multiplied with `V` (for `GateOp`, the global map).
    pub used: Tensor,
    pub global: Option<Tensor>,
    pub local: Option<Tensor>,
}

impl AttentionCache {
    pub fn head_maps(&self) -> Vec<HeadMaps> {
        self.heads
            .iter()
            .map(|h| HeadMaps {
                used: h.map.clone(),
                global: h.global.clone(),
                local: h.local.clone(),
            })
            .collect()
    }
}

/// One self-attention layer of a given variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub params: AttentionParams,
    pub variant: VariantConfig,
    /// Rescale GateAtt fused rows to sum to one. Off by default.
    pub renormalize_gate: bool,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, size: usize, variant: VariantConfig, rng: &mut R) -> Result<Self> {
        variant.validate(heads, size)?;
        let params = AttentionParams::init(dim, heads, size, variant.mode, rng)?;
        Ok(AttentionLayer {
            params,
            variant,
            renormalize_gate: false,
        })
    }

    pub fn heads(&self) -> usize {
        self.params.mhsa.heads()
    }

    /// Forward pass over `x` (`T x D`) whose first `valid_len` rows are real frames.
    pub fn forward(&self, x: &Tensor, valid_len: usize) -> Result<(Tensor, AttentionCache)> {
        let mhsa = &self.params.mhsa;
        let heads = mhsa.heads();
        let t = x.rows();
        if x.cols() != mhsa.dim() {
            return Err(Error::shape(
                "attention forward",
                format!("input {:?}, model dim {}", x.shape(), mhsa.dim()),
            ));
        }
        if valid_len == 0 || valid_len > t {
            return Err(Error::shape(
                "attention forward",
                format!("valid_len {valid_len} with {t} frames"),
            ));
        }
        self.variant.validate(heads, t)?;
        let mode = self.variant.mode;
        if let GateParams::Att(g) = &self.params.gate {
            if g.w_global.rows() != t {
                return Err(Error::shape(
                    "gate_attention_maps",
                    format!("gate weights sized for T={}, got {t} frames", g.w_global.rows()),
                ));
            }
        }

        let padding = (valid_len < t).then(|| AttentionMask::padding(t, valid_len));
        let padded_locals: Vec<AttentionMask> = self
            .variant
            .local_masks
            .iter()
            .map(|m| m.with_padding(valid_len))
            .collect();

        let mut head_caches = Vec::with_capacity(heads);
        for m in 0..heads {
            let (q, k, v) = project_qkv(x, mhsa, m)?;
            let local_mask = match mode {
                Mode::Baseline => None,
                Mode::ShareAtt => m.checked_sub(heads / 2).map(|i| &padded_locals[i]),
                Mode::GateAtt | Mode::GateOp | Mode::Local => padded_locals.first(),
            };
            let mut hc = HeadCache {
                map: Tensor::zeros(&[0]),
                q,
                k,
                v,
                global: None,
                local: None,
                gate: None,
                unnormalized: None,
            };
            match mode {
                Mode::Baseline | Mode::ShareAtt | Mode::Local => {
                    let mask = local_mask.or(padding.as_ref());
                    hc.map = attention_map(&hc.q, &hc.k, mask)?;
                }
                Mode::GateAtt => {
                    let GateParams::Att(g) = &self.params.gate else {
                        return Err(Error::config("gate", "GateAtt layer without gate parameters"));
                    };
                    let a_g = attention_map(&hc.q, &hc.k, padding.as_ref())?;
                    let a_l = attention_map(&hc.q, &hc.k, local_mask)?;
                    let (fused, r_g) = gate_attention_maps_with_gate(&a_g, &a_l, g)?;
                    if self.renormalize_gate {
                        let (normed, sums) = renormalize_rows(&fused);
                        hc.map = normed;
                        hc.unnormalized = Some((fused, sums));
                    } else {
                        hc.map = fused;
                    }
                    hc.global = Some(a_g);
                    hc.local = Some(a_l);
                    hc.gate = Some(r_g);
                }
                Mode::GateOp => {
                    let a_g = attention_map(&hc.q, &hc.k, padding.as_ref())?;
                    let a_l = attention_map(&hc.q, &hc.k, local_mask)?;
                    hc.map = a_g.clone();
                    hc.global = Some(a_g);
                    hc.local = Some(a_l);
                }
            }
            head_caches.push(hc);
        }

        let (y, concat, gate_op) = match &self.params.gate {
            GateParams::Op(g) => {
                let a_g: Vec<Tensor> = head_caches.iter().map(|h| h.global.clone().unwrap()).collect();
                let a_l: Vec<Tensor> = head_caches.iter().map(|h| h.local.clone().unwrap()).collect();
                let v: Vec<Tensor> = head_caches.iter().map(|h| h.v.clone()).collect();
                let f = gate_outputs_cached(&a_g, &a_l, &v, g)?;
                let cache = GateOpCache {
                    o_g: f.o_g,
                    o_l: f.o_l,
                    y_g: f.y_g,
                    y_l: f.y_l,
                    r_g: f.r_g,
                };
                (f.y, None, Some(cache))
            }
            _ => {
                let w_o = mhsa
                    .w_o
                    .as_ref()
                    .ok_or_else(|| Error::config("w_o", "missing output projection"))?;
                let outs = head_caches
                    .iter()
                    .map(|h| head_output(&h.map, &h.v))
                    .collect::<Result<Vec<_>>>()?;
                let concat = Tensor::hconcat(&outs)?;
                (matmul(&concat, w_o)?, Some(concat), None)
            }
        };
        y.ensure_finite("attention forward")?;
        Ok((
            y,
            AttentionCache {
                x: x.clone(),
                heads: head_caches,
                concat,
                gate_op,
            },
        ))
    }

    /// Returns `dL/dX` and parameter gradients for upstream gradient `dy`.
    pub fn backward(&self, cache: &AttentionCache, dy: &Tensor) -> Result<(Tensor, AttentionParams)> {
        let mhsa = &self.params.mhsa;
        let heads = mhsa.heads();
        let dh = mhsa.head_dim();
        if cache.heads.len() != heads {
            return Err(Error::shape("attention backward", "cache does not match layer"));
        }
        if dy.shape() != cache.x.shape() {
            return Err(Error::shape(
                "attention backward",
                format!("dy {:?} vs x {:?}", dy.shape(), cache.x.shape()),
            ));
        }
        let mut grads = self.params.zeros_like();
        let x = &cache.x;
        let mut dx = Tensor::zeros(x.shape());
        let scale = 1.0 / (dh as f64).sqrt();

        // Per-head gradients w.r.t. the global and local maps (or the single map
        // for the ungated modes) and w.r.t. V.
        let mut d_used: Vec<Option<Tensor>> = vec![None; heads];
        let mut d_global: Vec<Option<Tensor>> = vec![None; heads];
        let mut d_local: Vec<Option<Tensor>> = vec![None; heads];
        let mut d_v: Vec<Tensor> = Vec::with_capacity(heads);

        match (&self.params.gate, &mut grads.gate) {
            (GateParams::Op(g), GateParams::Op(gg)) => {
                let c = cache
                    .gate_op
                    .as_ref()
                    .ok_or_else(|| Error::config("cache", "missing GateOp intermediates"))?;
                let mut dy_g = dy.clone();
                let mut dy_l = dy.clone();
                let mut d_pre = dy.clone();
                for idx in 0..dy.len() {
                    let r = c.r_g.data()[idx];
                    let up = dy.data()[idx];
                    dy_g.data_mut()[idx] = r * up;
                    dy_l.data_mut()[idx] = (1.0 - r) * up;
                    let dr = up * (c.y_g.data()[idx] - c.y_l.data()[idx]);
                    d_pre.data_mut()[idx] = dr * r * (1.0 - r);
                }
                gg.w_out_global = matmul_tn(&c.o_g, &dy_g)?;
                gg.w_out_local = matmul_tn(&c.o_l, &dy_l)?;
                gg.w_gate_global = matmul_tn(&c.o_g, &d_pre)?;
                gg.w_gate_local = matmul_tn(&c.o_l, &d_pre)?.scale(-1.0);
                let mut d_og = matmul_nt(&dy_g, &g.w_out_global)?;
                d_og.add_assign(&matmul_nt(&d_pre, &g.w_gate_global)?);
                let mut d_ol = matmul_nt(&dy_l, &g.w_out_local)?;
                d_ol.add_assign(&matmul_nt(&d_pre, &g.w_gate_local)?.scale(-1.0));
                for (m, h) in cache.heads.iter().enumerate() {
                    let a_g = h.global.as_ref().unwrap();
                    let a_l = h.local.as_ref().unwrap();
                    let dog = d_og.col_slice(m * dh, dh);
                    let dol = d_ol.col_slice(m * dh, dh);
                    d_global[m] = Some(matmul_nt(&dog, &h.v)?);
                    d_local[m] = Some(matmul_nt(&dol, &h.v)?);
                    let mut dv = matmul_tn(a_g, &dog)?;
                    dv.add_assign(&matmul_tn(a_l, &dol)?);
                    d_v.push(dv);
                }
            }
            _ => {
                let w_o = mhsa
                    .w_o
                    .as_ref()
                    .ok_or_else(|| Error::config("w_o", "missing output projection"))?;
                let concat = cache
                    .concat
                    .as_ref()
                    .ok_or_else(|| Error::config("cache", "missing concatenated head outputs"))?;
                grads.mhsa.w_o = Some(matmul_tn(concat, dy)?);
                let d_concat = matmul_nt(dy, w_o)?;
                for (m, h) in cache.heads.iter().enumerate() {
                    let d_o = d_concat.col_slice(m * dh, dh);
                    d_used[m] = Some(matmul_nt(&d_o, &h.v)?);
                    d_v.push(matmul_tn(&h.map, &d_o)?);
                }
            }
        }

        if let (GateParams::Att(g), GateParams::Att(gg)) = (&self.params.gate, &mut grads.gate) {
            for (m, h) in cache.heads.iter().enumerate() {
                let mut d_fused = d_used[m].take().unwrap();
                if let Some((_, sums)) = &h.unnormalized {
                    // map = fused / rowsum(fused)
                    let normed = &h.map;
                    for i in 0..d_fused.rows() {
                        let dot: f64 = d_fused.row(i).iter().zip(normed.row(i)).map(|(a, b)| a * b).sum();
                        for v in d_fused.row_mut(i) {
                            *v = (*v - dot) / sums[i];
                        }
                    }
                }
                let a_g = h.global.as_ref().unwrap();
                let a_l = h.local.as_ref().unwrap();
                let r_g = h.gate.as_ref().unwrap();
                let mut da_g = d_fused.clone();
                let mut da_l = d_fused.clone();
                let mut d_pre = d_fused.clone();
                for idx in 0..d_fused.len() {
                    let r = r_g.data()[idx];
                    let up = d_fused.data()[idx];
                    da_g.data_mut()[idx] = r * up;
                    da_l.data_mut()[idx] = (1.0 - r) * up;
                    let dr = up * (a_g.data()[idx] - a_l.data()[idx]);
                    d_pre.data_mut()[idx] = dr * r * (1.0 - r);
                }
                gg.w_global.add_assign(&matmul_tn(a_g, &d_pre)?);
                gg.w_local.add_assign(&matmul_tn(a_l, &d_pre)?.scale(-1.0));
                da_g.add_assign(&matmul_nt(&d_pre, &g.w_global)?);
                da_l.add_assign(&matmul_nt(&d_pre, &g.w_local)?.scale(-1.0));
                d_global[m] = Some(da_g);
                d_local[m] = Some(da_l);
            }
        }

        for (m, h) in cache.heads.iter().enumerate() {
            let mut d_logits = Tensor::zeros(&[x.rows(), x.rows()]);
            if let Some(d) = &d_used[m] {
                d_logits.add_assign(&softmax_backward(&h.map, d));
            }
            if let Some(d) = &d_global[m] {
                d_logits.add_assign(&softmax_backward(h.global.as_ref().unwrap(), d));
            }
            if let Some(d) = &d_local[m] {
                d_logits.add_assign(&softmax_backward(h.local.as_ref().unwrap(), d));
            }
            let d_scores = d_logits.scale(scale);
            let d_q = matmul(&d_scores, &h.k)?;
            let d_k = matmul_tn(&d_scores, &h.q)?;
            grads.mhsa.w_q[m] = matmul_tn(x, &d_q)?;
            grads.mhsa.w_k[m] = matmul_tn(x, &d_k)?;
            grads.mhsa.w_v[m] = matmul_tn(x, &d_v[m])?;
            dx.add_assign(&matmul_nt(&d_q, &mhsa.w_q[m])?);
            dx.add_assign(&matmul_nt(&d_k, &mhsa.w_k[m])?);
            dx.add_assign(&matmul_nt(&d_v[m], &mhsa.w_v[m])?);
        }
        Ok((dx, grads))
    }
}
