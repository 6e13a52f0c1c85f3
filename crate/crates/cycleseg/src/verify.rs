//! Gradient verification suites: every differentiable primitive and every
//! composed module checked against central finite differences. Used by the
//! `gradcheck` command and the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::convlstm::{cell_step, ConvLstmParams, ConvLstmState};
use crate::crm::{forward_full, refine, CrmConfig, LevelParams, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::layers::{cam_fuse, decode, encode, CamParams, EncoderConfig};
use crate::loss::{cross_entropy, lovasz_softmax};
use crate::rcm::{rcm_group_forward, ExchangeKind};
use crate::tensor::{check_gradients, GradCheck, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Modules,
    Full,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "modules" => Ok(Scope::Modules),
            "full" => Ok(Scope::Full),
            other => Err(Error::InvalidConfig(format!(
                "unknown gradcheck scope '{other}' (ops|modules|full)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < self.tolerance
    }
}

struct Check<'a> {
    seed: u64,
    results: &'a mut Vec<CheckOutcome>,
}

impl Check<'_> {
    /// FD-check `build` (a scalar-loss graph over `params`) and record the
    /// worst relative error.
    fn run(
        &mut self,
        name: &str,
        tolerance: f64,
        h: f64,
        probes: usize,
        params: &[Tensor],
        build: &dyn Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
    ) -> Result<()> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params)?;
        let grads = tape.backward(&loss)?;
        let analytic: Vec<Vec<f64>> = params
            .iter()
            .map(|p| {
                grads
                    .for_tensor(p)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect();
        let mut eval = |ps: &[Tensor]| {
            let mut t = Tape::new();
            Ok(build(&mut t, ps)?.item())
        };
        let worst = check_gradients(
            &mut eval,
            params,
            &analytic,
            &GradCheck {
                h,
                probes_per_tensor: probes,
                seed: self.seed ^ name.len() as u64,
            },
        )?;
        self.results.push(CheckOutcome {
            name: name.to_string(),
            worst_rel_err: worst,
            tolerance,
        });
        Ok(())
    }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// random linear readout so every output element carries gradient
fn readout(tape: &mut Tape, x: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(x.shape(), |_| rng.gen_range(-1.0..1.0));
    let prod = tape.mul(x, &w)?;
    Ok(tape.sum_all(&prod))
}

const OP_TOL: f64 = 1e-5;
const MODULE_TOL: f64 = 1e-4;

fn ops_checks(c: &mut Check<'_>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);

    let a = rand_t(&[3, 4], &mut rng);
    let b = rand_t(&[3, 4], &mut rng);
    c.run("op.add_sub_mul", OP_TOL, 1e-5, 16, &[a.clone(), b], &|t, ps| {
        let s = t.add(&ps[0], &ps[1])?;
        let m = t.mul(&s, &ps[0])?;
        let d = t.sub(&m, &ps[1])?;
        readout(t, &d, 101)
    })?;

    c.run("op.sigmoid_tanh_scale", OP_TOL, 1e-5, 16, &[a], &|t, ps| {
        let s = t.sigmoid(&ps[0]);
        let th = t.tanh(&s);
        let sc = t.scale(&th, -1.3);
        readout(t, &sc, 102)
    })?;

    // relu probed away from the kink
    let shifted = Tensor::from_fn(&[3, 4], |i| {
        let v = ((i * 37 % 23) as f64 / 11.0) - 1.0;
        if v < 0.0 {
            v - 0.4
        } else {
            v + 0.4
        }
    });
    c.run("op.relu", OP_TOL, 1e-5, 12, &[shifted], &|t, ps| {
        let r = t.relu(&ps[0]);
        readout(t, &r, 103)
    })?;

    let x = rand_t(&[1, 2, 5, 5], &mut rng);
    let k = rand_t(&[3, 2, 3, 3], &mut rng);
    let bias = rand_t(&[3], &mut rng);
    c.run(
        "op.conv2d",
        OP_TOL,
        1e-5,
        12,
        &[x.clone(), k.clone(), bias.clone()],
        &|t, ps| {
            let y = t.conv2d(&ps[0], &ps[1], Some(&ps[2]), 1, 1)?;
            readout(t, &y, 104)
        },
    )?;
    c.run(
        "op.conv2d_strided",
        OP_TOL,
        1e-5,
        12,
        &[x.clone(), k, bias],
        &|t, ps| {
            let y = t.conv2d(&ps[0], &ps[1], Some(&ps[2]), 2, 0)?;
            readout(t, &y, 105)
        },
    )?;

    let bias4 = rand_t(&[2], &mut rng);
    c.run("op.bias_add", OP_TOL, 1e-5, 12, &[x.clone(), bias4], &|t, ps| {
        let y = t.bias_add(&ps[0], &ps[1])?;
        readout(t, &y, 106)
    })?;

    let ma = rand_t(&[3, 4], &mut rng);
    let mb = rand_t(&[4, 2], &mut rng);
    c.run("op.matmul", OP_TOL, 1e-5, 16, &[ma.clone(), mb], &|t, ps| {
        let y = t.matmul(&ps[0], &ps[1])?;
        readout(t, &y, 107)
    })?;

    c.run("op.softmax_rows", OP_TOL, 1e-5, 12, &[ma.clone()], &|t, ps| {
        let y = t.softmax_rows(&ps[0])?;
        readout(t, &y, 108)
    })?;
    c.run("op.log_softmax_rows", OP_TOL, 1e-5, 12, &[ma], &|t, ps| {
        let y = t.log_softmax_rows(&ps[0])?;
        readout(t, &y, 109)
    })?;

    c.run("op.pool_avg", OP_TOL, 1e-5, 12, &[x.clone()], &|t, ps| {
        let y = t.pool_avg(&ps[0], 2, 2)?;
        readout(t, &y, 110)
    })?;
    c.run("op.pool_max", OP_TOL, 1e-5, 12, &[x.clone()], &|t, ps| {
        let y = t.pool_max(&ps[0], 2, 2)?;
        readout(t, &y, 111)
    })?;
    c.run("op.upsample_bilinear", OP_TOL, 1e-5, 12, &[x.clone()], &|t, ps| {
        let y = t.upsample_bilinear(&ps[0], 8, 9)?;
        readout(t, &y, 112)
    })?;

    c.run("op.reshape_transpose", OP_TOL, 1e-5, 12, &[x.clone()], &|t, ps| {
        let r = t.reshape(&ps[0], &[2, 25])?;
        let tr = t.transpose2d(&r)?;
        readout(t, &tr, 113)
    })?;

    let x2 = rand_t(&[1, 3, 5, 5], &mut rng);
    c.run("op.concat_channels", OP_TOL, 1e-5, 12, &[x, x2], &|t, ps| {
        let y = t.concat_channels(&[&ps[0], &ps[1]])?;
        readout(t, &y, 114)
    })?;

    let q = rand_t(&[5, 3], &mut rng);
    let k1 = rand_t(&[4, 3], &mut rng);
    let k2 = rand_t(&[4, 3], &mut rng);
    let v1 = rand_t(&[4, 2], &mut rng);
    let v2 = rand_t(&[4, 2], &mut rng);
    c.run(
        "op.attend",
        OP_TOL,
        1e-5,
        10,
        &[q, k1, k2, v1, v2],
        &|t, ps| {
            let y = t.attend(
                &ps[0],
                &[ps[1].clone(), ps[2].clone()],
                &[ps[3].clone(), ps[4].clone()],
            )?;
            readout(t, &y, 115)
        },
    )?;

    let m1 = rand_t(&[1, 2, 3, 3], &mut rng);
    let m2 = rand_t(&[1, 2, 3, 3], &mut rng);
    let m3 = rand_t(&[1, 2, 3, 3], &mut rng);
    c.run(
        "op.mean_symmetric",
        OP_TOL,
        1e-5,
        12,
        &[m1, m2, m3],
        &|t, ps| {
            let y = t.mean_symmetric(&[&ps[0], &ps[1], &ps[2]])?;
            readout(t, &y, 116)
        },
    )?;

    Ok(())
}

/// clone `base`, overwrite its tensors from the flat list
fn level_from_flat(base: &LevelParams, ps: &[Tensor]) -> LevelParams {
    let mut level = base.clone();
    let mut slots = Vec::new();
    level.visit_mut("l", &mut slots);
    for ((_, slot), val) in slots.into_iter().zip(ps) {
        *slot = val.clone();
    }
    level
}

fn model_from_flat(base: &ModelParams, ps: &[Tensor]) -> ModelParams {
    let mut model = base.clone();
    let slots = model.named_mut();
    for ((_, slot), val) in slots.into_iter().zip(ps) {
        *slot = val.clone();
    }
    model
}

fn flat_of_level(level: &LevelParams) -> Vec<Tensor> {
    let mut named = Vec::new();
    level.visit("l", &mut named);
    named.into_iter().map(|(_, t)| t.clone()).collect()
}

fn modules_checks(c: &mut Check<'_>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0xABCD);

    // ConvLSTM cell chained three steps
    let lstm = ConvLstmParams::init(&mut rng, 2);
    let mut named = Vec::new();
    lstm.visit("lstm", &mut named);
    let flat: Vec<Tensor> = named.into_iter().map(|(_, t)| t.clone()).collect();
    let x0 = rand_t(&[1, 2, 3, 3], &mut rng);
    let h0 = rand_t(&[1, 2, 3, 3], &mut rng);
    let c0 = rand_t(&[1, 2, 3, 3], &mut rng);
    {
        let x0 = x0.clone();
        let lstm = lstm.clone();
        c.run("module.convlstm_cell_x3", MODULE_TOL, 1e-4, 6, &flat, &move |t, ps| {
            let mut params = lstm.clone();
            let mut slots = Vec::new();
            params.visit_mut("lstm", &mut slots);
            for ((_, slot), val) in slots.into_iter().zip(ps) {
                *slot = val.clone();
            }
            let mut state = ConvLstmState {
                hidden: h0.clone(),
                cell: c0.clone(),
            };
            for step in 0..3 {
                let x = if step == 0 {
                    x0.clone()
                } else {
                    state.hidden.clone()
                };
                state = cell_step(t, &params, &x, &state, false)?;
            }
            readout(t, &state.hidden, 201)
        })?;
    }

    // RCM over three branches
    let level = LevelParams::init_for_check(&mut rng, 3);
    let states: Vec<Tensor> = (0..3).map(|_| rand_t(&[1, 3, 4, 4], &mut rng)).collect();
    {
        let level_base = level.clone();
        let states = states.clone();
        c.run(
            "module.rcm_group",
            MODULE_TOL,
            1e-4,
            6,
            &flat_of_level(&level),
            &move |t, ps| {
                let level = level_from_flat(&level_base, ps);
                let refs: Vec<&Tensor> = states.iter().collect();
                let x = rcm_group_forward(t, &level.rcm, 0, &refs, Some((2, 2)))?;
                readout(t, &x, 202)
            },
        )?;
    }

    // CRM refinement, three steps, two branches
    let level2 = LevelParams::init_for_check(&mut rng, 2);
    let fa = rand_t(&[1, 2, 4, 4], &mut rng);
    let fb = rand_t(&[1, 2, 4, 4], &mut rng);
    {
        let base = level2.clone();
        let (fa, fb) = (fa.clone(), fb.clone());
        c.run(
            "module.crm_refine_n3",
            MODULE_TOL,
            1e-4,
            5,
            &flat_of_level(&level2),
            &move |t, ps| {
                let level = level_from_flat(&base, ps);
                let cfg = CrmConfig {
                    steps: 3,
                    exchange: ExchangeKind::Rcm,
                    roi: Some((2, 2)),
                    standard_candidate: false,
                };
                let init = vec![
                    ConvLstmState {
                        hidden: fa.clone(),
                        cell: fa.clone(),
                    },
                    ConvLstmState {
                        hidden: fb.clone(),
                        cell: fb.clone(),
                    },
                ];
                let trace = refine(t, &level, &cfg, init)?;
                readout(t, &trace.final_states()[0].hidden, 203)
            },
        )?;
    }

    // encoder and decoder
    let mcfg = ModelConfig {
        encoder: EncoderConfig {
            in_channels: 3,
            channels: vec![4, 8],
        },
        levels: 1,
        crm_channels: 8,
        classes: 2,
    };
    let model = ModelParams::init(c.seed ^ 7, &mcfg)?;
    let img = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.gen_range(0.2..0.9));
    {
        let enc = model.encoder.clone();
        let img = img.clone();
        let mut named = Vec::new();
        enc.visit("e", &mut named);
        let flat: Vec<Tensor> = named.into_iter().map(|(_, t)| t.clone()).collect();
        let base = enc.clone();
        c.run("module.encoder", MODULE_TOL, 1e-4, 6, &flat, &move |t, ps| {
            let mut enc = base.clone();
            let mut slots = Vec::new();
            enc.visit_mut("e", &mut slots);
            for ((_, slot), val) in slots.into_iter().zip(ps) {
                *slot = val.clone();
            }
            let pyr = encode(t, &enc, &img)?;
            readout(t, pyr.stages.last().unwrap(), 204)
        })?;
    }
    {
        let dec = model.decoder.clone();
        let deep = rand_t(&[1, 8, 4, 4], &mut rng);
        let mut named = Vec::new();
        dec.visit("d", &mut named);
        let flat: Vec<Tensor> = named.into_iter().map(|(_, t)| t.clone()).collect();
        let base = dec.clone();
        c.run("module.decoder", MODULE_TOL, 1e-4, 6, &flat, &move |t, ps| {
            let mut dec = base.clone();
            let mut slots = Vec::new();
            dec.visit_mut("d", &mut slots);
            for ((_, slot), val) in slots.into_iter().zip(ps) {
                *slot = val.clone();
            }
            let logits = decode(t, &dec, &deep, &[])?;
            readout(t, &logits, 205)
        })?;
    }

    // channel-attention fusion
    {
        let cam = CamParams::init(&mut rng, 4, 4);
        let shallow = rand_t(&[1, 4, 4, 4], &mut rng);
        let deep = rand_t(&[1, 4, 2, 2], &mut rng);
        let mut named = Vec::new();
        cam.visit("cam", &mut named);
        let flat: Vec<Tensor> = named.into_iter().map(|(_, t)| t.clone()).collect();
        let base = cam.clone();
        c.run("module.cam_fuse", MODULE_TOL, 1e-4, 6, &flat, &move |t, ps| {
            let mut cam = base.clone();
            let mut slots = Vec::new();
            cam.visit_mut("cam", &mut slots);
            for ((_, slot), val) in slots.into_iter().zip(ps) {
                *slot = val.clone();
            }
            let f = cam_fuse(t, &cam, &shallow, &deep)?;
            readout(t, &f, 206)
        })?;
    }

    // both losses w.r.t. logits
    let gt = Tensor::from_fn(&[1, 1, 4, 4], |i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { 0.0 });
    let logits = rand_t(&[1, 2, 4, 4], &mut rng);
    {
        let gt = gt.clone();
        c.run(
            "module.lovasz_softmax",
            MODULE_TOL,
            1e-5,
            16,
            std::slice::from_ref(&logits),
            &move |t, ps| lovasz_softmax(t, &ps[0], &gt),
        )?;
    }
    {
        let gt = gt.clone();
        c.run(
            "module.cross_entropy",
            MODULE_TOL,
            1e-5,
            16,
            std::slice::from_ref(&logits),
            &move |t, ps| cross_entropy(t, &ps[0], &gt),
        )?;
    }

    Ok(())
}

fn full_checks(c: &mut Check<'_>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0xF011);
    for (name, levels, lovasz) in [
        ("full.toy_net_lovasz", 1usize, true),
        ("full.toy_net_ce", 1, false),
        ("full.toy_net_multilevel", 2, true),
    ] {
        let mcfg = ModelConfig {
            encoder: EncoderConfig {
                in_channels: 3,
                channels: vec![4, 8],
            },
            levels,
            crm_channels: 8,
            classes: 2,
        };
        let model = ModelParams::init(c.seed ^ levels as u64, &mcfg)?;
        let flat: Vec<Tensor> = model.named().into_iter().map(|(_, t)| t.clone()).collect();
        let img_a = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.gen_range(0.1..0.9));
        let img_b = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.gen_range(0.1..0.9));
        let gt_a = Tensor::from_fn(&[1, 1, 16, 16], |i| {
            if (i / 16).abs_diff(8) + (i % 16).abs_diff(8) < 6 {
                1.0
            } else {
                0.0
            }
        });
        let gt_b = Tensor::from_fn(&[1, 1, 16, 16], |i| {
            if (i / 16) < 8 && (i % 16) < 9 {
                1.0
            } else {
                0.0
            }
        });
        let base = model.clone();
        let mcfg2 = mcfg.clone();
        c.run(name, MODULE_TOL, 1e-4, 3, &flat, &move |t, ps| {
            let model = model_from_flat(&base, ps);
            let crm = CrmConfig {
                steps: 3,
                exchange: ExchangeKind::Rcm,
                roi: Some((2, 2)),
                standard_candidate: false,
            };
            let out = forward_full(t, &model, &mcfg2, &crm, &[&img_a, &img_b])?;
            let loss_fn = if lovasz { lovasz_softmax } else { cross_entropy };
            let la = loss_fn(t, &out.logits[0], &gt_a)?;
            let lb = loss_fn(t, &out.logits[1], &gt_b)?;
            let sum = t.add(&la, &lb)?;
            Ok(t.scale(&sum, 0.5))
        })?;
    }
    Ok(())
}

impl LevelParams {
    /// test-sized level parameters (width == feature channels)
    fn init_for_check(rng: &mut ChaCha8Rng, width: usize) -> Self {
        LevelParams {
            init_proj: crate::layers::ConvParam::init(rng, width, width, 1, 1),
            lstm: ConvLstmParams::init(rng, width),
            rcm: crate::rcm::RcmParams::init(rng, width),
            mcat_proj: crate::layers::ConvParam::init(rng, width, 2 * width, 1, 1),
        }
    }
}

/// Run the requested scope (wider scopes include the narrower ones).
pub fn run_suite(scope: Scope, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut results = Vec::new();
    let mut check = Check {
        seed,
        results: &mut results,
    };
    ops_checks(&mut check)?;
    if scope != Scope::Ops {
        modules_checks(&mut check)?;
    }
    if scope == Scope::Full {
        full_checks(&mut check)?;
    }
    Ok(results)
}
