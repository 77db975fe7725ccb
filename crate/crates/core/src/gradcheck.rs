//! Central finite-difference verification of analytic gradients, both as
//! a library facility and behind the `gradcheck` CLI command.
//!
//! Each selector builds a small randomized scenario: a parameter store, an
//! input buffer, and a forward pass ending in a fixed random-weighted sum
//! so every output element influences the scalar loss. The checker then
//! compares the tape's gradients against `(f(x+h) - f(x-h)) / 2h` in f64.
//!
//! Max/min pooling makes the loss piecewise smooth. When a coordinate
//! disagrees, the checker re-probes at half step: if the two difference
//! quotients disagree with each other, the coordinate sits on a kink where
//! the finite difference itself is invalid and is excluded; a stable
//! quotient that still disagrees with the analytic value is a failure.

use crate::attention::{self, ReweightVariant, SpemParams};
use crate::backbone::block_probe;
use crate::error::{Result, SpemError};
use crate::param::{ParamId, ParamStore};
use crate::pooling::{self, MixCoefficient, PoolingStrategy};
use crate::reference::TestRng;
use crate::tensor::{Tape, TensorId};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_err: f64,
    /// Coordinates excluded because the loss is not smooth there.
    pub skipped_kinks: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub selector: String,
    pub seed: u64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE
    }
}

/// Gradients captured on the analytic pass.
struct Captured {
    loss: f64,
    x_grad: Vec<f64>,
    store: ParamStore,
}

/// A forward pass that can either just evaluate the loss or also run
/// backward and report every gradient.
type ForwardFn = Box<dyn FnMut(&ParamStore, &[f64], bool) -> Result<Captured>>;

struct Scenario {
    store: ParamStore,
    x: Vec<f64>,
    /// (group name, parameter) pairs to check, besides the input.
    params: Vec<(String, ParamId)>,
    forward: ForwardFn,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-7 {
        0.0
    } else {
        (a - n).abs() / denom.max(1e-6)
    }
}

fn finish(
    tape: &mut Tape,
    store: &ParamStore,
    x_id: TensorId,
    loss: TensorId,
    want_grads: bool,
) -> Result<Captured> {
    let value = tape.scalar(loss)?;
    if !want_grads {
        return Ok(Captured {
            loss: value,
            x_grad: Vec::new(),
            store: ParamStore::new(),
        });
    }
    tape.backward(loss)?;
    let mut grads_store = store.clone();
    tape.accumulate_param_grads(&mut grads_store);
    let x_grad = tape
        .grad(x_id)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; tape.data(x_id).len()]);
    Ok(Captured {
        loss: value,
        x_grad,
        store: grads_store,
    })
}

/// Compare one gradient buffer against central differences of `eval`.
fn check_coords(
    analytic: &[f64],
    base: &[f64],
    eval: &mut dyn FnMut(&[f64]) -> Result<f64>,
) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut skipped = 0usize;
    let mut buf = base.to_vec();
    for idx in 0..base.len() {
        let mut fd_at = |buf: &mut Vec<f64>, step: f64| -> Result<f64> {
            buf[idx] = base[idx] + step;
            let plus = eval(buf)?;
            buf[idx] = base[idx] - step;
            let minus = eval(buf)?;
            buf[idx] = base[idx];
            Ok((plus - minus) / (2.0 * step))
        };
        let fd = fd_at(&mut buf, STEP)?;
        let err = rel_err(analytic[idx], fd);
        if err >= TOLERANCE {
            let fd_half = fd_at(&mut buf, STEP / 2.0)?;
            if rel_err(fd, fd_half) > 1e-3 {
                skipped += 1;
                continue;
            }
            worst = worst.max(rel_err(analytic[idx], fd_half).min(err));
        } else {
            worst = worst.max(err);
        }
    }
    Ok((worst, skipped))
}

/// Widen any near-tied extremum so the probe point is locally smooth.
fn separate_extrema(x: &mut [f64], planes: usize, plane: usize, margin: f64) {
    for p in 0..planes {
        let sl = &mut x[p * plane..(p + 1) * plane];
        for maximize in [true, false] {
            let mut best = 0usize;
            for j in 1..sl.len() {
                let better = if maximize { sl[j] > sl[best] } else { sl[j] < sl[best] };
                if better {
                    best = j;
                }
            }
            let mut gap = f64::INFINITY;
            for (j, &v) in sl.iter().enumerate() {
                if j != best {
                    let d = if maximize { sl[best] - v } else { v - sl[best] };
                    gap = gap.min(d);
                }
            }
            if gap < margin {
                if maximize {
                    sl[best] += margin;
                } else {
                    sl[best] -= margin;
                }
            }
        }
    }
}

fn weighted_sum(tape: &mut Tape, out: TensorId, weights: &[f64]) -> Result<TensorId> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(weights.to_vec(), &shape)?;
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn run_scenario(selector: &str, mut scenario: Scenario) -> Result<GradCheckReport> {
    let captured = (scenario.forward)(&scenario.store, &scenario.x, true)?;
    let _ = captured.loss;

    let mut groups = Vec::new();

    let base_x = scenario.x.clone();
    let store_snapshot = scenario.store.clone();
    let (worst, skipped) = {
        let forward = &mut scenario.forward;
        check_coords(&captured.x_grad, &base_x, &mut |x| {
            forward(&store_snapshot, x, false).map(|c| c.loss)
        })?
    };
    groups.push(GroupReport {
        group: "x".into(),
        max_rel_err: worst,
        skipped_kinks: skipped,
    });

    for (name, id) in scenario.params.clone() {
        let analytic = captured
            .store
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; captured.store.get(id).numel()]);
        let base = scenario.store.get(id).data.clone();
        let mut store = scenario.store.clone();
        let x = scenario.x.clone();
        let forward = &mut scenario.forward;
        let (worst, skipped) = check_coords(&analytic, &base, &mut |buf| {
            store.get_mut(id).data.copy_from_slice(buf);
            forward(&store, &x, false).map(|c| c.loss)
        })?;
        groups.push(GroupReport {
            group: name,
            max_rel_err: worst,
            skipped_kinks: skipped,
        });
    }

    Ok(GradCheckReport {
        selector: selector.to_string(),
        seed: 0,
        groups,
    })
}

/// Run the finite-difference comparison for one selector and seed.
/// Selectors: `pooling`, `excitation`, `reweight:<variant>`, `spem`,
/// `block`.
pub fn run(selector: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = TestRng::new(seed.wrapping_mul(0x5851_F42D_4C95_7F2D).wrapping_add(11));
    let scenario = match selector {
        "pooling" => pooling_scenario(&mut rng)?,
        "excitation" => excitation_scenario(&mut rng)?,
        "spem" => spem_scenario(&mut rng)?,
        "block" => block_scenario(&mut rng, seed)?,
        other => match other.strip_prefix("reweight:") {
            Some(tag) => reweight_scenario(&mut rng, ReweightVariant::parse(tag)?)?,
            None => {
                return Err(SpemError::Config(format!(
                    "unknown gradcheck selector '{other}' \
                     (want pooling|excitation|reweight:<variant>|spem|block)"
                )))
            }
        },
    };
    let mut report = run_scenario(selector, scenario)?;
    report.seed = seed;
    Ok(report)
}

fn randomize(store: &mut ParamStore, rng: &mut TestRng, lo: f64, hi: f64) {
    for p in store.iter_mut() {
        for v in p.data.iter_mut() {
            *v = rng.uniform(lo, hi);
        }
    }
}

fn pooling_scenario(rng: &mut TestRng) -> Result<Scenario> {
    let (c, h, w) = (3, 5 + rng.index(3), 4 + rng.index(3));
    let mut x = rng.uniform_vec(c * h * w, -2.0, 2.0);
    separate_extrema(&mut x, c, h * w, 0.05);
    let mut store = ParamStore::new();
    let mix = MixCoefficient::register(&mut store, "mix");
    store.get_mut(mix.p0).data[0] = rng.uniform(0.3, 1.2);
    store.get_mut(mix.p1).data[0] = rng.uniform(0.3, 1.2);
    let weights = rng.uniform_vec(c, -1.0, 1.0);
    let shape = vec![c, h, w];
    Ok(Scenario {
        params: vec![("p0".into(), mix.p0), ("p1".into(), mix.p1)],
        store,
        x,
        forward: Box::new(move |store, x, want| {
            let mut tape = Tape::new();
            let x_id = tape.var(x.to_vec(), &shape)?;
            let u = pooling::mix_pool(&mut tape, store, x_id, &PoolingStrategy::AdaptiveMix(mix))?;
            let loss = weighted_sum(&mut tape, u.id(), &weights)?;
            finish(&mut tape, store, x_id, loss, want)
        }),
    })
}

fn excitation_scenario(rng: &mut TestRng) -> Result<Scenario> {
    let c = 4 + rng.index(4);
    let x = rng.uniform_vec(c, -2.0, 2.0);
    let mut store = ParamStore::new();
    let params = SpemParams::register(&mut store, "m", c, ReweightVariant::SharedAddSigmoid);
    randomize(&mut store, rng, -1.0, 1.0);
    let weights = rng.uniform_vec(c, -1.0, 1.0);
    let shape = vec![c, 1, 1];
    let (gamma, beta) = (params.gamma_exc, params.beta_exc);
    Ok(Scenario {
        params: vec![("gamma_exc".into(), gamma), ("beta_exc".into(), beta)],
        store,
        x,
        forward: Box::new(move |store, x, want| {
            let mut tape = Tape::new();
            let x_id = tape.var(x.to_vec(), &shape)?;
            let u = pooling::ChannelVector::wrap(&tape, x_id)?;
            let v = attention::excitation(&mut tape, store, u, gamma, beta)?;
            let loss = weighted_sum(&mut tape, v.id(), &weights)?;
            finish(&mut tape, store, x_id, loss, want)
        }),
    })
}

fn reweight_scenario(rng: &mut TestRng, variant: ReweightVariant) -> Result<Scenario> {
    let (c, h, w) = (3, 5, 4);
    let mut x = rng.uniform_vec(c * h * w, -2.0, 2.0);
    separate_extrema(&mut x, c, h * w, 0.05);
    let mut store = ParamStore::new();
    let params = SpemParams::register(&mut store, "m", c, variant);
    randomize(&mut store, rng, -1.0, 1.0);
    let weights = rng.uniform_vec(c, -1.0, 1.0);
    let shape = vec![c, h, w];
    let mut checks = vec![
        ("gamma_rew".to_string(), params.gamma_rew),
        ("beta_rew".to_string(), params.beta_rew),
    ];
    if let Some((g2, b2)) = params.rew_unshared {
        checks.push(("gamma_rew2".into(), g2));
        checks.push(("beta_rew2".into(), b2));
    }
    Ok(Scenario {
        params: checks,
        store,
        x,
        forward: Box::new(move |store, x, want| {
            let mut tape = Tape::new();
            let x_id = tape.var(x.to_vec(), &shape)?;
            let f_max = pooling::global_max_pool(&mut tape, x_id)?;
            let f_min = pooling::global_min_pool(&mut tape, x_id)?;
            let v = attention::reweight(&mut tape, store, f_max, f_min, &params, variant)?;
            let loss = weighted_sum(&mut tape, v.id(), &weights)?;
            finish(&mut tape, store, x_id, loss, want)
        }),
    })
}

fn spem_scenario(rng: &mut TestRng) -> Result<Scenario> {
    let (c, h, w) = (3 + rng.index(3), 5, 5);
    let mut x = rng.uniform_vec(c * h * w, -2.0, 2.0);
    separate_extrema(&mut x, c, h * w, 0.05);
    let mut store = ParamStore::new();
    let params = SpemParams::register(&mut store, "m", c, ReweightVariant::SharedAddSigmoid);
    randomize(&mut store, rng, -1.0, 1.0);
    store.get_mut(params.mix.p0).data[0] = rng.uniform(0.3, 1.2);
    store.get_mut(params.mix.p1).data[0] = rng.uniform(0.3, 1.2);
    let strategy = PoolingStrategy::AdaptiveMix(params.mix);
    let weights = rng.uniform_vec(c, -1.0, 1.0);
    let shape = vec![c, h, w];
    let checks: Vec<(String, ParamId)> = vec![
        ("p0".into(), params.mix.p0),
        ("p1".into(), params.mix.p1),
        ("gamma_exc".into(), params.gamma_exc),
        ("beta_exc".into(), params.beta_exc),
        ("gamma_rew".into(), params.gamma_rew),
        ("beta_rew".into(), params.beta_rew),
    ];
    Ok(Scenario {
        params: checks,
        store,
        x,
        forward: Box::new(move |store, x, want| {
            let mut tape = Tape::new();
            let x_id = tape.var(x.to_vec(), &shape)?;
            let v = attention::spem_forward(
                &mut tape,
                store,
                x_id,
                &params,
                ReweightVariant::SharedAddSigmoid,
                &strategy,
            )?;
            let loss = weighted_sum(&mut tape, v.id(), &weights)?;
            finish(&mut tape, store, x_id, loss, want)
        }),
    })
}

fn block_scenario(rng: &mut TestRng, seed: u64) -> Result<Scenario> {
    let (n, c, hw) = (2, 8, 6);
    let x = rng.uniform_vec(n * c * hw * hw, -1.5, 1.5);
    let probe = block_probe(c, 2, 1, seed)?;
    let weights = rng.uniform_vec(n * c * hw * hw, -1.0, 1.0);
    let shape = vec![n, c, hw, hw];
    let checks: Vec<(String, ParamId)> = probe
        .store
        .ids()
        .map(|id| (probe.store.get(id).name.clone(), id))
        .collect();
    let store = probe.store.clone();
    let probe_cell = std::cell::RefCell::new(probe);
    Ok(Scenario {
        params: checks,
        store,
        x,
        forward: Box::new(move |store, x, want| {
            let mut tape = Tape::new();
            let x_id = tape.var(x.to_vec(), &shape)?;
            let out = probe_cell.borrow_mut().forward_with(&mut tape, store, x_id)?;
            let loss = weighted_sum(&mut tape, out, &weights)?;
            finish(&mut tape, store, x_id, loss, want)
        }),
    })
}

pub fn format_report(report: &GradCheckReport) -> String {
    let mut out = format!(
        "gradcheck {} seed {}: max rel err {:.3e} [{}]\n",
        report.selector,
        report.seed,
        report.max_rel_err(),
        if report.passed() { "ok" } else { "FAIL" }
    );
    for g in &report.groups {
        out.push_str(&format!(
            "  {:<24} {:>12.3e}{}\n",
            g.group,
            g.max_rel_err,
            if g.skipped_kinks > 0 {
                format!("  ({} kink coords skipped)", g.skipped_kinks)
            } else {
                String::new()
            }
        ));
    }
    out
}
