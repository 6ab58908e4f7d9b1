//! Declarative layer stacks in the `s x s x n (t)` notation, their
//! instantiation with He initialization, exact parameter counting and the
//! `PAWC` checkpoint format.

mod checkpoint;
pub mod presets;
#[cfg(test)]
mod props;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamSet, Real, Tensor, Var};

pub use checkpoint::{attach, load, load_params, read_params, save, save_params, write_params, CHECKPOINT_VERSION, MAGIC};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// `repeat` stacked convolutions, each followed by ReLU, padding `k/2`.
    Conv,
    Pool,
    Gap,
    /// Dense map with bias; flattens its input.
    Fc,
    /// Block-diagonal map without bias, one block per attribute.
    GroupFc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub channels_out: usize,
    pub repeat: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub fn conv(kernel: usize, channels_out: usize, repeat: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            kernel,
            channels_out,
            repeat,
            stride: 1,
        }
    }

    pub fn pool(kernel: usize) -> Self {
        Self {
            kind: LayerKind::Pool,
            kernel,
            channels_out: 1,
            repeat: 1,
            stride: kernel,
        }
    }

    pub fn gap() -> Self {
        Self {
            kind: LayerKind::Gap,
            kernel: 1,
            channels_out: 1,
            repeat: 1,
            stride: 1,
        }
    }

    pub fn fc(channels_out: usize) -> Self {
        Self {
            kind: LayerKind::Fc,
            kernel: 1,
            channels_out,
            repeat: 1,
            stride: 1,
        }
    }

    /// Outputs one logit per attribute; its width is fixed at build time.
    pub fn group_fc() -> Self {
        Self {
            kind: LayerKind::GroupFc,
            kernel: 1,
            channels_out: 1,
            repeat: 1,
            stride: 1,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.repeat == 0 || self.kernel == 0 || self.channels_out == 0 || self.stride == 0 {
            return Err(Error::Spec(format!(
                "layer {index}: kernel, channels, repeat and stride must all be at least 1"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    /// `(channels, height, width)`.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub attribute_count: usize,
    pub branch_maps: usize,
}

/// Activation shape flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Map(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Map(c, h, w) => c * h * w,
            Shape::Flat(d) => d,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One parameter tensor a layer owns, with its layout and fan-in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub dims: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
}

impl NetworkSpec {
    /// Output shape after each layer (index-aligned with `layers`) together
    /// with every parameter tensor the stack needs, in instantiation order.
    pub fn plan(&self) -> Result<(Vec<Shape>, Vec<ParamShape>)> {
        let (c0, h0, w0) = self.input;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::Spec(format!("{}: empty input {:?}", self.name, self.input)));
        }
        if self.attribute_count == 0 {
            return Err(Error::Spec(format!("{}: attribute count must be positive", self.name)));
        }
        let mut shape = Shape::Map(c0, h0, w0);
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut params = Vec::new();
        let (mut conv_idx, mut fc_idx) = (0, 0);
        for (li, layer) in self.layers.iter().enumerate() {
            layer.validate(li)?;
            shape = match (layer.kind, shape) {
                (LayerKind::Conv, Shape::Map(mut c, mut h, mut w)) => {
                    conv_idx += 1;
                    let pad = layer.kernel / 2;
                    for r in 0..layer.repeat {
                        if layer.kernel > h + 2 * pad || layer.kernel > w + 2 * pad {
                            return Err(Error::Spec(format!(
                                "{}: conv{conv_idx} kernel {} does not fit {h}x{w}",
                                self.name, layer.kernel
                            )));
                        }
                        let fan_in = c * layer.kernel * layer.kernel;
                        params.push(ParamShape {
                            name: format!("conv{conv_idx}.{r}.weight"),
                            dims: vec![layer.channels_out, c, layer.kernel, layer.kernel],
                            fan_in,
                            is_bias: false,
                        });
                        params.push(ParamShape {
                            name: format!("conv{conv_idx}.{r}.bias"),
                            dims: vec![layer.channels_out],
                            fan_in,
                            is_bias: true,
                        });
                        h = (h + 2 * pad - layer.kernel) / layer.stride + 1;
                        w = (w + 2 * pad - layer.kernel) / layer.stride + 1;
                        c = layer.channels_out;
                    }
                    Shape::Map(c, h, w)
                }
                (LayerKind::Pool, Shape::Map(c, h, w)) => {
                    if layer.kernel > h || layer.kernel > w {
                        return Err(Error::Spec(format!(
                            "{}: pool at layer {li} ({}x{} window) collapses a {h}x{w} map below 1x1",
                            self.name, layer.kernel, layer.kernel
                        )));
                    }
                    Shape::Map(c, (h - layer.kernel) / layer.stride + 1, (w - layer.kernel) / layer.stride + 1)
                }
                (LayerKind::Gap, Shape::Map(c, _, _)) => Shape::Flat(c),
                (LayerKind::Fc, s) => {
                    fc_idx += 1;
                    let d = s.len();
                    params.push(ParamShape {
                        name: format!("fc{fc_idx}.weight"),
                        dims: vec![layer.channels_out, d],
                        fan_in: d,
                        is_bias: false,
                    });
                    params.push(ParamShape {
                        name: format!("fc{fc_idx}.bias"),
                        dims: vec![layer.channels_out],
                        fan_in: d,
                        is_bias: true,
                    });
                    Shape::Flat(layer.channels_out)
                }
                (LayerKind::GroupFc, Shape::Flat(d)) => {
                    let m = self.attribute_count;
                    if d % m != 0 {
                        return Err(Error::Spec(format!(
                            "{}: grouped classifier cannot split {d} features into {m} attributes",
                            self.name
                        )));
                    }
                    params.push(ParamShape {
                        name: "group_fc.weight".into(),
                        dims: vec![m, d / m],
                        fan_in: d / m,
                        is_bias: false,
                    });
                    Shape::Flat(m)
                }
                (kind, s) => {
                    return Err(Error::Spec(format!(
                        "{}: layer {li} ({kind:?}) cannot follow a {s:?} activation",
                        self.name
                    )))
                }
            };
            shapes.push(shape);
        }
        Ok((shapes, params))
    }

    /// Number of parameter tensors owned by `layers[..upto]`.
    pub fn param_tensors_before(&self, upto: usize) -> usize {
        self.layers
            .iter()
            .take(upto)
            .map(|l| match l.kind {
                LayerKind::Conv => 2 * l.repeat,
                LayerKind::Fc => 2,
                LayerKind::GroupFc => 1,
                LayerKind::Pool | LayerKind::Gap => 0,
            })
            .sum()
    }

    /// Index of the last convolution layer in `layers`.
    pub fn last_conv(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| l.kind == LayerKind::Conv)
    }

    /// Checks the structural invariants: the stack ends in `M` logits and,
    /// for localization nets, the last conv emits `M * N` maps.
    pub fn validate(&self, localization: bool) -> Result<Vec<Shape>> {
        let (shapes, _) = self.plan()?;
        match shapes.last() {
            Some(Shape::Flat(m)) if *m == self.attribute_count => {}
            other => {
                return Err(Error::Spec(format!(
                    "{}: network must end in {} logits, ends in {other:?}",
                    self.name, self.attribute_count
                )))
            }
        }
        if localization {
            let last = self
                .last_conv()
                .ok_or_else(|| Error::Spec(format!("{}: no convolution layer", self.name)))?;
            let want = self.attribute_count * self.branch_maps;
            if self.layers[last].channels_out != want {
                return Err(Error::Spec(format!(
                    "{}: final conv has {} channels, localization needs M*N = {want}",
                    self.name, self.layers[last].channels_out
                )));
            }
        }
        Ok(shapes)
    }

    pub fn with_input(mut self, input: (usize, usize, usize)) -> Self {
        self.input = input;
        self
    }
}

/// Closed-form parameter count: `k*k*C_in*C_out + C_out` per conv repeat,
/// `D*O + O` per dense layer, `G*D` for the grouped classifier.
pub fn count_params(spec: &NetworkSpec) -> Result<usize> {
    // The planner rejects malformed stacks before any shape arithmetic.
    spec.plan()?;
    let (c0, h0, w0) = spec.input;
    let mut c = c0;
    let (mut h, mut w) = (h0, w0);
    let mut flat: Option<usize> = None;
    let mut total = 0;
    for layer in &spec.layers {
        match layer.kind {
            LayerKind::Conv => {
                let pad = layer.kernel / 2;
                for _ in 0..layer.repeat {
                    total += layer.kernel * layer.kernel * c * layer.channels_out + layer.channels_out;
                    c = layer.channels_out;
                    h = (h + 2 * pad - layer.kernel) / layer.stride + 1;
                    w = (w + 2 * pad - layer.kernel) / layer.stride + 1;
                }
            }
            LayerKind::Pool => {
                h = (h - layer.kernel) / layer.stride + 1;
                w = (w - layer.kernel) / layer.stride + 1;
            }
            LayerKind::Gap => flat = Some(c),
            LayerKind::Fc => {
                let d = flat.unwrap_or(c * h * w);
                total += d * layer.channels_out + layer.channels_out;
                flat = Some(layer.channels_out);
            }
            LayerKind::GroupFc => {
                total += flat.unwrap_or(c * h * w);
                flat = Some(spec.attribute_count);
            }
        }
    }
    Ok(total)
}

/// A spec together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Real = f32> {
    pub spec: NetworkSpec,
    pub params: ParamSet<T>,
}

/// Tape handles produced by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// Output of every layer (post-ReLU for convs), index-aligned with
    /// `spec.layers`.
    pub layers: Vec<Var>,
    pub logits: Var,
}

/// He-initialized parameters: `N(0, 2/fan_in)` weights, zero biases.
pub fn build<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<Network<T>> {
    let (_, param_shapes) = spec.plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for p in param_shapes {
        let len: usize = p.dims.iter().product();
        let data = if p.is_bias {
            vec![T::zero(); len]
        } else {
            let std = (2.0 / p.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Spec(e.to_string()))?;
            (0..len).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect()
        };
        params.push(p.name, Tensor::new(p.dims, data)?)?;
    }
    Ok(Network {
        spec: spec.clone(),
        params,
    })
}

impl<T: Real> Network<T> {
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Evaluates the stack on `input` (`[B, C, H, W]`). `vars` are the
    /// parameter leaves from `self.params.bind`.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, vars: &[Var]) -> Result<Forward> {
        self.forward_until(g, input, vars, self.spec.layers.len())
    }

    /// Like [`Network::forward`] but stops after `upto` layers; `logits` is
    /// then the last evaluated layer.
    pub fn forward_until(&self, g: &mut Graph<T>, input: Var, vars: &[Var], upto: usize) -> Result<Forward> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{}: {} parameter handles for {} parameters",
                self.spec.name,
                vars.len(),
                self.params.len()
            )));
        }
        let mut x = input;
        let mut p = 0;
        let mut outs = Vec::with_capacity(upto);
        for layer in self.spec.layers.iter().take(upto) {
            x = match layer.kind {
                LayerKind::Conv => {
                    for _ in 0..layer.repeat {
                        let y = g.conv2d(x, vars[p], vars[p + 1], layer.stride, layer.kernel / 2)?;
                        p += 2;
                        x = g.relu(y);
                    }
                    x
                }
                LayerKind::Pool => g.maxpool2d(x, layer.kernel, layer.stride)?,
                LayerKind::Gap => g.gap(x)?,
                LayerKind::Fc => {
                    let flat = if g.dims(x).len() > 2 { g.flatten(x)? } else { x };
                    let y = g.linear(flat, vars[p], Some(vars[p + 1]))?;
                    p += 2;
                    y
                }
                LayerKind::GroupFc => {
                    let flat = if g.dims(x).len() > 2 { g.flatten(x)? } else { x };
                    let y = g.group_linear(flat, vars[p])?;
                    p += 1;
                    y
                }
            };
            outs.push(x);
        }
        Ok(Forward { logits: x, layers: outs })
    }

    /// Forward pass without gradient tracking returning `[B, M]` logits.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, x, &vars)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;

    #[test]
    fn desk_frl_four_pool_shape_arithmetic() {
        let spec = desk_frl_four_pool(6, 8);
        let shapes = spec.validate(true).unwrap();
        let last = spec.last_conv().unwrap();
        assert_eq!(shapes[last], Shape::Map(48, 4, 4));
        assert_eq!(shapes[last + 1], Shape::Flat(48));
    }

    #[test]
    fn published_tnet_branch_width() {
        let spec = published_tnet();
        let last = spec.last_conv().unwrap();
        assert_eq!(spec.layers[last].channels_out, 40 * 32);
        spec.validate(true).unwrap();
    }

    #[test]
    fn gap_length_equals_final_conv_channels() {
        for spec in [desk_frl(6, 8), desk_student(6, 8), published_snet3()] {
            let shapes = spec.validate(false).unwrap();
            let last = spec.last_conv().unwrap();
            let Shape::Map(c, _, _) = shapes[last] else { panic!() };
            let gap = spec.layers.iter().position(|l| l.kind == LayerKind::Gap).unwrap();
            assert_eq!(shapes[gap], Shape::Flat(c));
        }
    }

    #[test]
    fn single_dense_layer_count() {
        let spec = NetworkSpec {
            name: "fc".into(),
            input: (1280, 1, 1),
            layers: vec![LayerSpec::gap(), LayerSpec::fc(40)],
            attribute_count: 40,
            branch_maps: 32,
        };
        assert_eq!(count_params(&spec).unwrap(), 51_240);
    }

    #[test]
    fn spatial_collapse_names_the_pool() {
        let mut spec = desk_frl(6, 8).with_input((3, 8, 8));
        spec.layers.insert(1, LayerSpec::pool(2));
        let err = build::<f32>(&spec, 0).unwrap_err().to_string();
        assert!(err.contains("pool at layer"), "{err}");
    }

    #[test]
    fn localization_requires_m_times_n_maps() {
        let mut spec = desk_frl(6, 8);
        let last = spec.last_conv().unwrap();
        spec.layers[last].channels_out = 40;
        assert!(spec.validate(true).is_err());
    }

    #[test]
    fn count_matches_instantiation() {
        for spec in [desk_frl(6, 8), desk_frl_four_pool(6, 8), desk_student(6, 8), desk_student_dense(6, 8)] {
            let net = build::<f32>(&spec, 3).unwrap();
            assert_eq!(count_params(&spec).unwrap(), net.param_count(), "{}", spec.name);
        }
    }

    #[test]
    fn param_tensor_prefix_counts() {
        let spec = desk_student(6, 8);
        let net = build::<f32>(&spec, 0).unwrap();
        assert_eq!(spec.param_tensors_before(spec.layers.len()), net.params.len());
        assert_eq!(spec.param_tensors_before(spec.last_conv().unwrap() + 1), net.params.len() - 1);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let spec = desk_student(6, 8);
        let a = build::<f32>(&spec, 11).unwrap();
        let b = build::<f32>(&spec, 11).unwrap();
        let c = build::<f32>(&spec, 12).unwrap();
        assert!(a.params.bit_eq(&b.params));
        assert!(!a.params.bit_eq(&c.params));
    }

    #[test]
    fn biases_start_at_zero_and_weights_follow_he_scale() {
        let net = build::<f64>(&desk_frl(6, 8), 5).unwrap();
        for (name, t) in net.params.iter() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
        let w = net.params.get("conv3.0.weight").unwrap();
        let fan_in = (w.len() / w.dims()[0]) as f64;
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var * fan_in / 2.0 - 1.0).abs() < 0.1, "{var}");
    }
}
