//! Cycle refinement: branches exchange information computed from the
//! previous step's cell states, then all advance one ConvLSTM step. The
//! update is synchronous: every branch reads step t-1 state, then every
//! branch steps. Also home to the assembled model (encoder + per-level
//! CRM + decoder) and its parameter bookkeeping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::convlstm::{cell_step, init_state, ConvLstmParams, ConvLstmState};
use crate::error::{Error, Result};
use crate::layers::{
    decode, encode, ConvParam, DecoderLayout, DecoderParams, EncoderConfig, EncoderParams,
};
use crate::rcm::{baseline_exchange, rcm_group_forward, ExchangeKind, RcmParams, RoiSize};
use crate::tensor::{load_checkpoint, save_checkpoint, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct CrmConfig {
    /// refinement steps N >= 1
    pub steps: usize,
    pub exchange: ExchangeKind,
    pub roi: RoiSize,
    /// conventional single input-gate application instead of the printed
    /// double one
    pub standard_candidate: bool,
}

impl Default for CrmConfig {
    fn default() -> Self {
        CrmConfig {
            steps: 7,
            exchange: ExchangeKind::Rcm,
            roi: Some((2, 2)),
            standard_candidate: false,
        }
    }
}

/// Parameters of one CRM level: the state-init projection, the shared
/// ConvLSTM, the RCM projections, and the M_cat baseline projection. All of
/// them always exist so a seed produces the same initialization whatever the
/// exchange kind, which keeps ablation variants comparable.
#[derive(Clone, Debug)]
pub struct LevelParams {
    pub init_proj: ConvParam,
    pub lstm: ConvLstmParams,
    pub rcm: RcmParams,
    pub mcat_proj: ConvParam,
}

impl LevelParams {
    fn init(rng: &mut ChaCha8Rng, feature_channels: usize, width: usize) -> Self {
        LevelParams {
            init_proj: ConvParam::init(rng, width, feature_channels, 1, 1),
            lstm: ConvLstmParams::init(rng, width),
            rcm: RcmParams::init(rng, width),
            mcat_proj: ConvParam::init(rng, width, 2 * width, 1, 1),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.init_proj.visit(&format!("{prefix}.init_proj"), out);
        self.lstm.visit(&format!("{prefix}.lstm"), out);
        self.rcm.visit(&format!("{prefix}.rcm"), out);
        self.mcat_proj.visit(&format!("{prefix}.mcat_proj"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.init_proj.visit_mut(&format!("{prefix}.init_proj"), out);
        self.lstm.visit_mut(&format!("{prefix}.lstm"), out);
        self.rcm.visit_mut(&format!("{prefix}.rcm"), out);
        self.mcat_proj.visit_mut(&format!("{prefix}.mcat_proj"), out);
    }
}

/// Static model shape: encoder stages, how many of the deepest stages get
/// their own CRM, and the ConvLSTM width cap.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub levels: usize,
    pub crm_channels: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            levels: 1,
            crm_channels: 16,
            classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.levels == 0 || self.levels > self.encoder.stages() {
            return Err(Error::InvalidConfig(format!(
                "levels must be in 1..={}, got {}",
                self.encoder.stages(),
                self.levels
            )));
        }
        if self.crm_channels == 0 {
            return Err(Error::InvalidConfig("crm_channels must be positive".into()));
        }
        Ok(())
    }

    /// Encoder stage feeding CRM level `li` (level 0 is the deepest stage).
    pub fn level_stage(&self, li: usize) -> usize {
        self.encoder.stages() - 1 - li
    }

    /// ConvLSTM width of level `li`: the stage width capped at
    /// `crm_channels`.
    pub fn level_width(&self, li: usize) -> usize {
        self.encoder.channels[self.level_stage(li)].min(self.crm_channels)
    }

    pub fn decoder_layout(&self) -> DecoderLayout {
        let stages = self.encoder.stages();
        let chans = &self.encoder.channels;
        let mut block_io = Vec::with_capacity(stages);
        let mut fuse = Vec::with_capacity(stages);
        let mut cin = self.level_width(0);
        for i in 0..stages {
            // blocks run at twice the mirrored encoder width: decoding from
            // a narrow bottleneck needs headroom to sharpen boundaries
            let cout = if i + 2 <= stages {
                2 * chans[stages - 2 - i]
            } else {
                2 * chans[0]
            };
            block_io.push((cin, cout));
            // after block i the map sits at stage (stages-2-i) resolution,
            // where CRM level i+1 lives
            let li = i + 1;
            fuse.push(if li < self.levels {
                Some(self.level_width(li))
            } else {
                None
            });
            cin = cout;
        }
        DecoderLayout {
            block_io,
            fuse_deep_channels: fuse,
            classes: self.classes,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub levels: Vec<LevelParams>,
    pub decoder: DecoderParams,
}

impl ModelParams {
    /// Deterministic initialization: one seed, one parameter stream, in
    /// declaration order.
    pub fn init(seed: u64, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&mut rng, &cfg.encoder);
        let levels = (0..cfg.levels)
            .map(|li| {
                LevelParams::init(
                    &mut rng,
                    cfg.encoder.channels[cfg.level_stage(li)],
                    cfg.level_width(li),
                )
            })
            .collect();
        let decoder = DecoderParams::init(&mut rng, &cfg.decoder_layout());
        Ok(ModelParams {
            encoder,
            levels,
            decoder,
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder.visit("encoder", &mut out);
        for (i, l) in self.levels.iter().enumerate() {
            l.visit(&format!("level{i}"), &mut out);
        }
        self.decoder.visit("decoder", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.encoder.visit_mut("encoder", &mut out);
        for (i, l) in self.levels.iter_mut().enumerate() {
            l.visit_mut(&format!("level{i}"), &mut out);
        }
        self.decoder.visit_mut("decoder", &mut out);
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(path, &self.named().into_iter().collect::<Vec<_>>())
    }

    /// Load a checkpoint into a structurally matching model. Names and
    /// shapes must match exactly.
    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        let loaded = load_checkpoint(path)?;
        let mut slots = self.named_mut();
        if loaded.len() != slots.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model wants {}",
                loaded.len(),
                slots.len()
            )));
        }
        for ((name, tensor), (want_name, slot)) in loaded.into_iter().zip(slots.iter_mut()) {
            if name != *want_name {
                return Err(Error::Format(format!(
                    "checkpoint tensor '{name}' does not match model slot '{want_name}'"
                )));
            }
            if tensor.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor '{name}': shape {:?} vs {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            **slot = tensor;
        }
        Ok(())
    }
}

/// Every intermediate state of one level's refinement:
/// `steps[t][branch]`, `t = 0..N`.
pub struct RefineTrace {
    pub steps: Vec<Vec<ConvLstmState>>,
}

impl RefineTrace {
    pub fn final_states(&self) -> &[ConvLstmState] {
        self.steps.last().expect("refine produces at least one step")
    }
}

/// Run N synchronous refinement steps over k branches sharing one parameter
/// set. Exchange inputs are computed from the previous step's cell states
/// for every branch before any branch advances.
pub fn refine(
    tape: &mut Tape,
    level: &LevelParams,
    cfg: &CrmConfig,
    init: Vec<ConvLstmState>,
) -> Result<RefineTrace> {
    let k = init.len();
    if k < 2 {
        return Err(Error::GroupTooSmall { k });
    }
    if cfg.steps == 0 {
        return Err(Error::InvalidConfig("refinement needs steps >= 1".into()));
    }
    if cfg.exchange != ExchangeKind::Rcm && k != 2 {
        return Err(Error::InvalidConfig(format!(
            "{} exchange is pairwise only, got k={k}",
            cfg.exchange.name()
        )));
    }

    let mut states = init;
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let prev_cells: Vec<&Tensor> = states.iter().map(|s| &s.cell).collect();
        let mut inputs = Vec::with_capacity(k);
        for b in 0..k {
            let x = match cfg.exchange {
                ExchangeKind::Rcm => {
                    rcm_group_forward(tape, &level.rcm, b, &prev_cells, cfg.roi)?
                }
                ExchangeKind::NoExchange => prev_cells[b].clone(),
                kind => baseline_exchange(
                    tape,
                    kind,
                    prev_cells[b],
                    prev_cells[1 - b],
                    &level.mcat_proj,
                )?,
            };
            inputs.push(x);
        }
        let mut next = Vec::with_capacity(k);
        for (b, x) in inputs.iter().enumerate() {
            next.push(cell_step(
                tape,
                &level.lstm,
                x,
                &states[b],
                cfg.standard_candidate,
            )?);
        }
        states = next;
        trace.push(states.clone());
    }
    Ok(RefineTrace { steps: trace })
}

/// Full forward pass output: final per-image logits plus the per-level
/// refinement traces for per-step decoding.
pub struct ForwardOutput {
    pub logits: Vec<Tensor>,
    /// `traces[level]`, level 0 deepest
    pub traces: Vec<RefineTrace>,
}

/// Encode every image, refine each active level independently, decode every
/// branch from the final hidden states (deep level through the decoder,
/// shallower levels fused in along the way).
pub fn forward_full(
    tape: &mut Tape,
    params: &ModelParams,
    mcfg: &ModelConfig,
    crm: &CrmConfig,
    images: &[&Tensor],
) -> Result<ForwardOutput> {
    let k = images.len();
    if k < 2 {
        return Err(Error::GroupTooSmall { k });
    }
    if params.levels.len() != mcfg.levels {
        return Err(Error::InvalidConfig(format!(
            "model has {} levels, config wants {}",
            params.levels.len(),
            mcfg.levels
        )));
    }

    let pyramids: Vec<_> = images
        .iter()
        .map(|img| encode(tape, &params.encoder, img))
        .collect::<Result<Vec<_>>>()?;

    let mut traces = Vec::with_capacity(mcfg.levels);
    for (li, level) in params.levels.iter().enumerate() {
        let stage = mcfg.level_stage(li);
        let init: Vec<ConvLstmState> = pyramids
            .iter()
            .map(|p| init_state(tape, &level.init_proj, &p.stages[stage]))
            .collect::<Result<_>>()?;
        traces.push(refine(tape, level, crm, init)?);
    }

    let mut logits = Vec::with_capacity(k);
    for b in 0..k {
        logits.push(decode_from_traces(tape, params, &traces, None, b)?);
    }
    Ok(ForwardOutput { logits, traces })
}

/// Decode branch `b` from the trace states at `step` (`None` = final step).
/// Per-step decoding reuses the one decoder on intermediate hidden states.
pub fn decode_from_traces(
    tape: &mut Tape,
    params: &ModelParams,
    traces: &[RefineTrace],
    step: Option<usize>,
    branch: usize,
) -> Result<Tensor> {
    let pick = |trace: &RefineTrace| -> Result<ConvLstmState> {
        let states = match step {
            Some(t) => trace.steps.get(t).ok_or_else(|| {
                Error::InvalidConfig(format!("step {t} out of range: {}", trace.steps.len()))
            })?,
            None => trace.final_states(),
        };
        Ok(states[branch].clone())
    };
    let deep = pick(&traces[0])?;
    let fuse_states: Vec<ConvLstmState> =
        traces[1..].iter().map(pick).collect::<Result<_>>()?;
    let fuse_refs: Vec<&Tensor> = fuse_states.iter().map(|s| &s.hidden).collect();
    decode(tape, &params.decoder, &deep.hidden, &fuse_refs)
}

/// Per-pixel foreground probability (softmax over the two classes, channel
/// 1) as a `[1,1,H,W]` map.
pub fn foreground_probability(tape: &mut Tape, logits: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = logits.dims4()?;
    if c != 2 {
        return Err(Error::shape(format!("expected 2 classes, got {c}")));
    }
    let rows = tape.reshape(logits, &[c, h * w])?;
    let rows = tape.transpose2d(&rows)?;
    let p = tape.softmax_rows(&rows)?;
    let fg = Tensor::from_fn(&[1, 1, h, w], |i| p.data()[i * 2 + 1]);
    Ok(fg)
}

/// Wraps the model as a tuple predictor for group segmentation. Each tuple
/// runs one untracked forward pass of size k = tuple length.
pub struct ModelPredictor<'a> {
    pub params: &'a ModelParams,
    pub mcfg: &'a ModelConfig,
    pub crm: CrmConfig,
}

impl crate::groupstrat::TuplePredictor for ModelPredictor<'_> {
    fn predict(&self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let out = forward_full(&mut tape, self.params, self.mcfg, &self.crm, images)?;
        out.logits
            .iter()
            .map(|l| foreground_probability(&mut tape, l))
            .collect()
    }
}
