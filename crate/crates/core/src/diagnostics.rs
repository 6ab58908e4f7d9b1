//! Finite-difference verification of every differentiable piece of the
//! cascade, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::frl::FrlNetwork;
use crate::netspec::{build, NetworkSpec};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};

/// Tolerance every check must meet.
pub const MAX_REL_ERR: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct NamedCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl NamedCheck {
    fn new(name: &str, r: GradCheckReport) -> Self {
        Self {
            name: name.into(),
            max_rel_err: r.max_rel_err,
            checked: r.checked,
            skipped: r.skipped,
        }
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn normal(&mut self, dims: &[usize], scale: f64) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| scale * self.0.sample::<f64, _>(StandardNormal))
    }

    fn labels(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.0.random_bool(0.5) as u8 as f64).collect()
    }
}

/// Reduces any tensor with a leading batch axis to a smooth scalar.
fn bce_of(g: &mut Graph<f64>, x: Var, labels: &[f64]) -> Result<Var> {
    let flat = if g.dims(x).len() == 2 { x } else { g.flatten(x)? };
    g.sigmoid_bce(flat, &labels[..g.value(flat).len()])
}

/// Per-layer, per-loss and whole-network checks. `net` is checked end to
/// end; localization nets also carry their auxiliary classification branch.
pub fn grad_check_suite(net: &NetworkSpec, seed: u64) -> Result<Vec<NamedCheck>> {
    let mut rng = Gen(ChaCha8Rng::seed_from_u64(seed));
    let opts = GradCheckOptions {
        seed,
        ..Default::default()
    };
    let y = rng.labels(4096);
    let mut out = Vec::new();

    let inputs = [rng.normal(&[2, 5], 1.0), rng.normal(&[3, 5], 0.5), rng.normal(&[3], 0.5)];
    let r = grad_check(&inputs, &opts, |g, v| {
        let z = g.linear(v[0], v[1], Some(v[2]))?;
        bce_of(g, z, &y)
    })?;
    out.push(NamedCheck::new("linear+sigmoid_bce", r));

    for (name, stride) in [("conv2d", 1), ("conv2d_stride2", 2)] {
        let inputs = [rng.normal(&[2, 2, 5, 5], 1.0), rng.normal(&[3, 2, 3, 3], 0.3), rng.normal(&[3], 0.1)];
        let r = grad_check(&inputs, &opts, |g, v| {
            let z = g.conv2d(v[0], v[1], v[2], stride, 1)?;
            bce_of(g, z, &y)
        })?;
        out.push(NamedCheck::new(name, r));
    }

    let r = grad_check(&[rng.normal(&[2, 3, 4, 4], 1.0)], &opts, |g, v| {
        let z = g.relu(v[0]);
        bce_of(g, z, &y)
    })?;
    out.push(NamedCheck::new("relu", r));

    let r = grad_check(&[rng.normal(&[2, 2, 4, 5], 1.0)], &opts, |g, v| {
        let z = g.maxpool2d(v[0], 2, 2)?;
        bce_of(g, z, &y)
    })?;
    out.push(NamedCheck::new("maxpool2d", r));

    let r = grad_check(&[rng.normal(&[2, 3, 4, 4], 1.0)], &opts, |g, v| {
        let z = g.gap(v[0])?;
        bce_of(g, z, &y)
    })?;
    out.push(NamedCheck::new("gap", r));

    let inputs = [
        rng.normal(&[2, 2, 8, 8], 1.0),
        rng.normal(&[4, 2, 3, 3], 0.4),
        rng.normal(&[4], 0.1),
        rng.normal(&[6, 4, 3, 3], 0.3),
        rng.normal(&[6], 0.1),
    ];
    let r = grad_check(&inputs, &opts, |g, v| {
        let a = g.conv2d(v[0], v[1], v[2], 1, 1)?;
        let a = g.relu(a);
        let a = g.maxpool2d(a, 2, 2)?;
        let a = g.conv2d(a, v[3], v[4], 1, 1)?;
        let a = g.relu(a);
        let z = g.gap(a)?;
        bce_of(g, z, &y)
    })?;
    out.push(NamedCheck::new("conv+pool+gap stack", r));

    let r = grad_check(&[rng.normal(&[2, 6], 1.0), rng.normal(&[3, 2], 0.5)], &opts, |g, v| {
        let z = g.group_linear(v[0], v[1])?;
        bce_of(g, z, &y)
    })?;
    out.push(NamedCheck::new("group_linear", r));

    let r = grad_check(&[rng.normal(&[2, 3], 1.0), rng.normal(&[2, 3], 1.0)], &opts, |g, v| {
        let z = g.stack(&[v[0], v[1]])?;
        bce_of(g, z, &y)
    })?;
    out.push(NamedCheck::new("stack", r));

    for (name, squared) in [("hint_loss", false), ("hint_loss_squared", true)] {
        let teacher = rng.normal(&[2, 3, 2, 2], 1.0);
        let r = grad_check(&[rng.normal(&[2, 3, 2, 2], 1.0)], &opts, |g, v| {
            let t = g.constant(teacher.clone());
            g.hint_loss(t, v[0], squared)
        })?;
        out.push(NamedCheck::new(name, r));
    }

    let r = grad_check(&[rng.normal(&[3, 4], 2.0)], &opts, |g, v| g.sigmoid_bce(v[0], &y[..12]))?;
    out.push(NamedCheck::new("attr_loss", r));

    let m = 4;
    let inputs = [rng.normal(&[2, m + 1, m], 1.0), rng.normal(&[m + 1, m], 0.5)];
    let r = grad_check(&inputs, &opts, |g, v| {
        let z = g.rsl(v[0], v[1])?;
        bce_of(g, z, &y)
    })?;
    out.push(NamedCheck::new("rsl", r));

    let inputs = [rng.normal(&[2, m], 1.0), rng.normal(&[m, m], 0.5), rng.normal(&[m], 0.1)];
    let r = grad_check(&inputs, &opts, |g, v| {
        let z = g.linear(v[0], v[1], Some(v[2]))?;
        bce_of(g, z, &y)
    })?;
    out.push(NamedCheck::new("arl", r));

    let teacher = rng.normal(&[2, 1, 2, 2], 1.0);
    let r = grad_check(&[rng.normal(&[2, 1, 2, 2], 1.0)], &opts, |g, v| {
        let t = g.constant(teacher.clone());
        let h = g.hint_loss(t, v[0], false)?;
        let a = bce_of(g, v[0], &y)?;
        g.weighted_sum(&[(0.7, h), (0.3, a)])
    })?;
    out.push(NamedCheck::new("weighted hint+attr objective", r));

    out.push(network_check(net, seed, &mut rng, &y)?);
    Ok(out)
}

fn network_check(spec: &NetworkSpec, seed: u64, rng: &mut Gen, y: &[f64]) -> Result<NamedCheck> {
    let frl = if spec.validate(true).is_ok() {
        FrlNetwork::<f64>::new(spec, Some(16), seed)?
    } else {
        spec.validate(false)?;
        FrlNetwork {
            net: build::<f64>(spec, seed)?,
            classifier: None,
        }
    };
    let (c, h, w) = spec.input;
    let mut inputs = vec![rng.normal(&[2, c, h, w], 0.5)];
    let n_loc = frl.net.params.len();
    inputs.extend(frl.net.params.tensors().cloned());
    if let Some(cls) = &frl.classifier {
        inputs.extend(cls.tensors().cloned());
    }
    let opts = GradCheckOptions {
        seed,
        max_coords_per_tensor: Some(12),
        ..Default::default()
    };
    let m = spec.attribute_count;
    let r = grad_check(&inputs, &opts, |g, v| {
        let cls = (v.len() > n_loc + 1).then(|| &v[n_loc + 1..]);
        let (zl, zc) = frl.forward(g, v[0], &v[1..=n_loc], cls)?;
        let ll = g.sigmoid_bce(zl, &y[..2 * m])?;
        match zc {
            Some(zc) => {
                let lc = g.sigmoid_bce(zc, &y[2 * m..4 * m])?;
                g.weighted_sum(&[(1.0, ll), (1.0, lc)])
            }
            None => Ok(ll),
        }
    })?;
    Ok(NamedCheck::new(&format!("network {}", spec.name), r))
}
