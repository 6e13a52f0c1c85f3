//! Region correspondence: each target pixel attends over ROI-pooled regional
//! representations of the other images, and the attended features are
//! averaged with a broadcast global statistic.
//!
//! The group path treats all non-target images as one big virtual image by
//! concatenating their region banks; with one source it reduces exactly to
//! the pairwise path. Cross-source reductions are symmetric, so the output
//! is bit-invariant under permutations of the sources.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::ConvParam;
use crate::tensor::{Tape, Tensor};

/// How branches exchange information inside the refinement loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExchangeKind {
    /// region-correspondence attention (the full mechanism)
    Rcm,
    /// broadcast global vector, concatenate, 1x1-project back
    MCat,
    /// broadcast global vector, multiply
    MMul,
    /// no exchange: plain foreground prediction
    NoExchange,
}

impl ExchangeKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rcm" => Ok(ExchangeKind::Rcm),
            "mcat" => Ok(ExchangeKind::MCat),
            "mmul" => Ok(ExchangeKind::MMul),
            "none" => Ok(ExchangeKind::NoExchange),
            other => Err(Error::InvalidConfig(format!(
                "unknown exchange kind '{other}' (rcm|mcat|mmul|none)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExchangeKind::Rcm => "rcm",
            ExchangeKind::MCat => "mcat",
            ExchangeKind::MMul => "mmul",
            ExchangeKind::NoExchange => "none",
        }
    }
}

/// 1x1 projections for the affinity (distinct target/bank transforms) and
/// the conv fusing average- and max-pooled regions.
#[derive(Clone, Debug)]
pub struct RcmParams {
    pub proj_target: ConvParam,
    pub proj_bank: ConvParam,
    pub fuse: ConvParam,
}

impl RcmParams {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        RcmParams {
            proj_target: ConvParam::init(rng, channels, channels, 1, 1),
            proj_bank: ConvParam::init(rng, channels, channels, 1, 1),
            fuse: ConvParam::init(rng, channels, 2 * channels, 1, 1),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.proj_target.visit(&format!("{prefix}.proj_target"), out);
        self.proj_bank.visit(&format!("{prefix}.proj_bank"), out);
        self.fuse.visit(&format!("{prefix}.fuse"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.proj_target.visit_mut(&format!("{prefix}.proj_target"), out);
        self.proj_bank.visit_mut(&format!("{prefix}.proj_bank"), out);
        self.fuse.visit_mut(&format!("{prefix}.fuse"), out);
    }
}

/// Regional representations of one or more source images, kept per source:
/// `sources[s]` is `[1, C, rh, rw]` where `rh x rw` is the ROI grid (or the
/// source's own resolution in raw mode). Flattened, each source contributes
/// `rh*rw` rows, concatenated in input order.
#[derive(Clone)]
pub struct RegionBank {
    pub sources: Vec<Tensor>,
}

impl RegionBank {
    pub fn source_count(&self) -> usize {
        self.sources.len()
    }

    pub fn rows_per_source(&self) -> Vec<usize> {
        self.sources
            .iter()
            .map(|s| s.shape()[2] * s.shape()[3])
            .collect()
    }

    pub fn row_count(&self) -> usize {
        self.rows_per_source().iter().sum()
    }
}

/// ROI size. `None` is raw mode: the bank keeps full-resolution rows and
/// skips the avg/max fusion.
pub type RoiSize = Option<(usize, usize)>;

/// Pool each source to the ROI grid (average and max, fused by a 1x1 conv)
/// and collect the per-source regional maps.
pub fn region_bank(
    tape: &mut Tape,
    params: &RcmParams,
    sources: &[&Tensor],
    roi: RoiSize,
) -> Result<RegionBank> {
    if sources.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let mut out = Vec::with_capacity(sources.len());
    for src in sources {
        let fused = match roi {
            Some((rh, rw)) => {
                let avg = tape.pool_avg(src, rh, rw)?;
                let max = tape.pool_max(src, rh, rw)?;
                let cat = tape.concat_channels(&[&avg, &max])?;
                tape.conv2d(&cat, &params.fuse.weight, Some(&params.fuse.bias), 1, 0)?
            }
            None => (*src).clone(),
        };
        out.push(fused);
    }
    Ok(RegionBank { sources: out })
}

/// `[1,C,h,w] -> [h*w, C]` (pixels as rows).
fn to_rows(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let flat = tape.reshape(x, &[c, h * w])?;
    tape.transpose2d(&flat)
}

/// `[p, C] -> [1, C, h, w]`.
fn from_rows(tape: &mut Tape, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    let t = tape.transpose2d(x)?;
    tape.reshape(&t, &[1, c, h, w])
}

/// Affinity between ReLU-projected target pixels and bank rows:
/// `S[p, r] = proj_target(target)_p . proj_bank(bank)_r`, rows concatenated
/// across sources. Inspection/verification path; the forward pass fuses the
/// same computation with its softmax.
pub fn affinity_matrix(
    tape: &mut Tape,
    params: &RcmParams,
    target: &Tensor,
    bank: &RegionBank,
) -> Result<Tensor> {
    let q4 = tape.conv2d(
        target,
        &params.proj_target.weight,
        Some(&params.proj_target.bias),
        1,
        0,
    )?;
    let q4 = tape.relu(&q4);
    let q = to_rows(tape, &q4)?;

    let mut key_rows = Vec::with_capacity(bank.sources.len());
    for src in &bank.sources {
        let k4 = tape.conv2d(
            src,
            &params.proj_bank.weight,
            Some(&params.proj_bank.bias),
            1,
            0,
        )?;
        let k4 = tape.relu(&k4);
        let rows = to_rows(tape, &k4)?;
        let t = tape.transpose2d(&rows)?; // [C, R_s]
        key_rows.push(t);
    }
    // per-source score blocks, stitched side by side in source order
    let mut blocks = Vec::with_capacity(key_rows.len());
    for t in &key_rows {
        let kt = tape.matmul(&q, t)?; // [P, R_s]
        blocks.push(kt);
    }
    let p = blocks[0].dims2()?.0;
    let total: usize = blocks.iter().map(|b| b.shape()[1]).sum();
    let mut data = vec![0.0; p * total];
    let mut off = 0;
    for b in &blocks {
        let (_, r) = b.dims2()?;
        for row in 0..p {
            data[row * total + off..row * total + off + r]
                .copy_from_slice(&b.data()[row * r..(row + 1) * r]);
        }
        off += r;
    }
    Tensor::new(vec![p, total], data)
}

/// Full region-correspondence output for one target:
/// attended bank features averaged with the broadcast mean of the sources'
/// global average pools, `(X + Up(avg of AvgPool(sources))) / 2`.
pub fn rcm_forward(
    tape: &mut Tape,
    params: &RcmParams,
    target: &Tensor,
    bank: &RegionBank,
    global_sources: &[&Tensor],
) -> Result<Tensor> {
    if bank.sources.is_empty() || global_sources.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let (_, c, h, w) = target.dims4()?;

    let q4 = tape.conv2d(
        target,
        &params.proj_target.weight,
        Some(&params.proj_target.bias),
        1,
        0,
    )?;
    let q4 = tape.relu(&q4);
    let q = to_rows(tape, &q4)?;

    let mut keys = Vec::with_capacity(bank.sources.len());
    let mut values = Vec::with_capacity(bank.sources.len());
    for src in &bank.sources {
        let k4 = tape.conv2d(
            src,
            &params.proj_bank.weight,
            Some(&params.proj_bank.bias),
            1,
            0,
        )?;
        let k4 = tape.relu(&k4);
        keys.push(to_rows(tape, &k4)?);
        values.push(to_rows(tape, src)?);
    }

    let attended = tape.attend(&q, &keys, &values)?;
    let attended4 = from_rows(tape, &attended, h, w)?;

    let gaps: Vec<Tensor> = global_sources
        .iter()
        .map(|s| tape.pool_avg(s, 1, 1))
        .collect::<Result<_>>()?;
    let gap_refs: Vec<&Tensor> = gaps.iter().collect();
    let global = tape.mean_symmetric(&gap_refs)?;
    let global_up = tape.upsample_bilinear(&global, h, w)?;
    if global_up.shape() != [1, c, h, w] {
        return Err(Error::shape(format!(
            "rcm: global term {:?} vs target {:?}",
            global_up.shape(),
            target.shape()
        )));
    }

    let sum = tape.add(&attended4, &global_up)?;
    Ok(tape.scale(&sum, 0.5))
}

/// One-versus-rest exchange inside a group of `k >= 2` cell states: the bank
/// is built from every non-target state in index order. `k = 2` is exactly
/// the pairwise path.
pub fn rcm_group_forward(
    tape: &mut Tape,
    params: &RcmParams,
    target_index: usize,
    cell_states: &[&Tensor],
    roi: RoiSize,
) -> Result<Tensor> {
    let k = cell_states.len();
    if k < 2 {
        return Err(Error::GroupTooSmall { k });
    }
    if target_index >= k {
        return Err(Error::InvalidConfig(format!(
            "target index {target_index} out of range for k={k}"
        )));
    }
    let others: Vec<&Tensor> = cell_states
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_index)
        .map(|(_, t)| *t)
        .collect();
    let bank = region_bank(tape, params, &others, roi)?;
    rcm_forward(tape, params, cell_states[target_index], &bank, &others)
}

/// Global-representation baselines. Pairwise only.
pub fn baseline_exchange(
    tape: &mut Tape,
    kind: ExchangeKind,
    target: &Tensor,
    source: &Tensor,
    mcat_proj: &ConvParam,
) -> Result<Tensor> {
    let (_, _, h, w) = target.dims4()?;
    match kind {
        ExchangeKind::NoExchange => Ok(target.clone()),
        ExchangeKind::MMul => {
            let gap = tape.pool_avg(source, 1, 1)?;
            let up = tape.upsample_bilinear(&gap, h, w)?;
            tape.mul(target, &up)
        }
        ExchangeKind::MCat => {
            let gap = tape.pool_avg(source, 1, 1)?;
            let up = tape.upsample_bilinear(&gap, h, w)?;
            let cat = tape.concat_channels(&[target, &up])?;
            tape.conv2d(&cat, &mcat_proj.weight, Some(&mcat_proj.bias), 1, 0)
        }
        ExchangeKind::Rcm => Err(Error::InvalidConfig(
            "baseline_exchange does not implement the rcm kind".into(),
        )),
    }
}
