//! Feedforward networks of affine (fully connected or convolutional),
//! normalization, ReLU and flatten layers with a softmax cross-entropy head.
//!
//! The activation entering layer `i` is position `i`; position `len()` holds
//! the logits. A spatial activation with `C` channels and `S` locations is a
//! `C × (N·S)` matrix with column `n·S + s`. Flatten turns it into a
//! `(C·S) × N` matrix with feature `c·S + s`, which is also the layout of
//! network inputs.

pub mod conv;
pub mod loss;
pub mod norm;

use rand::Rng;

pub use conv::{col2im, im2col, ConvGeometry};
pub use norm::{NormCache, NormLayer, NormMode};

use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::{gemm, matmul, Matrix, Op};

/// Weight `C_out × fan_in` and bias. Without a bias, `b` stays zero and is
/// not a trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub has_bias: bool,
    pub conv: Option<ConvGeometry>,
}

impl Affine {
    pub fn linear(w: Matrix, b: Option<Vec<f64>>) -> Self {
        let has_bias = b.is_some();
        let b = b.unwrap_or_else(|| vec![0.0; w.rows()]);
        Self { w, b, has_bias, conv: None }
    }

    pub fn conv(w: Matrix, b: Option<Vec<f64>>, geom: ConvGeometry) -> Self {
        Self { conv: Some(geom), ..Self::linear(w, b) }
    }

    /// Kaiming-uniform weights, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(out: usize, fan_in: usize, bias: bool, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Matrix::from_fn(out, fan_in, |_, _| rng.random_range(-bound..bound));
        Self::linear(w, bias.then(|| vec![0.0; out]))
    }

    pub fn out_features(&self) -> usize {
        self.w.rows()
    }

    /// Input rows of the unrolled input: `C_{l−1}` or `C_{l−1}·K_l`.
    pub fn fan_in(&self) -> usize {
        self.w.cols()
    }

    /// Unrolled input `(fan_in) × (N·S_out)`.
    pub fn unroll(&self, input: &Matrix, batch: usize) -> Result<Matrix> {
        match &self.conv {
            Some(g) => im2col(input, g, batch),
            None => Ok(input.clone()),
        }
    }

    pub fn apply(&self, cols: &Matrix) -> Result<Matrix> {
        let mut h = matmul(&self.w, cols)?;
        for i in 0..h.rows() {
            let b = self.b[i];
            if b != 0.0 {
                h.row_mut(i).iter_mut().for_each(|v| *v += b);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Affine(Affine),
    Norm(NormLayer),
    Relu,
    Flatten,
}

/// An affine layer together with the normalization layer directly after it,
/// if any. The pair is what the merged-weight view treats as one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub affine: usize,
    pub norm: Option<usize>,
}

impl Block {
    /// Position of the block's input activation.
    pub fn input(&self) -> usize {
        self.affine
    }

    /// Position of the block's output activation.
    pub fn output(&self) -> usize {
        self.norm.unwrap_or(self.affine) + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    in_channels: usize,
    in_spatial: usize,
    /// `(rows, spatial)` at every position.
    shapes: Vec<(usize, usize)>,
}

/// Activations and caches of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub batch: usize,
    pub train: bool,
    /// First evaluated layer; positions before it are empty.
    pub start: usize,
    pub acts: Vec<Matrix>,
    /// Unrolled inputs of convolutional layers.
    pub cols: Vec<Option<Matrix>>,
    pub norms: Vec<Option<NormCache>>,
}

impl Forward {
    pub fn logits(&self) -> &Matrix {
        self.acts.last().expect("forward pass has at least one position")
    }

    /// Unrolled input of an affine layer, without the homogeneous row.
    pub fn affine_input(&self, layer: usize) -> &Matrix {
        self.cols[layer].as_ref().unwrap_or(&self.acts[layer])
    }

    pub fn norm_cache(&self, layer: usize) -> Result<&NormCache> {
        self.norms
            .get(layer)
            .and_then(|c| c.as_ref())
            .ok_or_else(|| Error::MissingState(format!("no norm cache for layer {layer}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrad {
    None,
    Affine { w: Matrix, b: Vec<f64> },
    Norm { gamma: Vec<f64>, beta: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrad>,
}

impl ParamGrads {
    pub fn zeros(net: &Network) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Affine(a) => LayerGrad::Affine { w: Matrix::zeros(a.w.rows(), a.w.cols()), b: vec![0.0; a.b.len()] },
                Layer::Norm(n) => LayerGrad::Norm { gamma: vec![0.0; n.channels()], beta: vec![0.0; n.channels()] },
                _ => LayerGrad::None,
            })
            .collect();
        Self { layers }
    }

    pub fn affine_mut(&mut self, layer: usize) -> Result<(&mut Matrix, &mut Vec<f64>)> {
        match &mut self.layers[layer] {
            LayerGrad::Affine { w, b } => Ok((w, b)),
            _ => Err(invalid!("layer {layer} is not affine")),
        }
    }

    pub fn norm_mut(&mut self, layer: usize) -> Result<(&mut Vec<f64>, &mut Vec<f64>)> {
        match &mut self.layers[layer] {
            LayerGrad::Norm { gamma, beta } => Ok((gamma, beta)),
            _ => Err(invalid!("layer {layer} is not a norm layer")),
        }
    }
}

/// Result of a general backward sweep.
#[derive(Clone, Debug)]
pub struct Backward {
    pub params: Option<ParamGrads>,
    /// Gradients at the requested tap positions, zero where nothing flowed.
    pub taps: Vec<Matrix>,
}

/// `D[t][n]` = `∂L_n/∂(activation at taps[t])`, one matrix per example.
#[derive(Clone, Debug)]
pub struct PerExampleGrads {
    pub taps: Vec<usize>,
    pub d: Vec<Vec<Matrix>>,
}

/// `(C·S) × N` with feature `c·S+s` to `C × (N·S)` with column `n·S+s`.
pub fn unflatten(x: &Matrix, channels: usize, spatial: usize) -> Result<Matrix> {
    if x.rows() != channels * spatial {
        return Err(shape_err!("cannot unflatten {} rows into {channels} channels of {spatial}", x.rows()));
    }
    let n = x.cols();
    Ok(Matrix::from_fn(channels, n * spatial, |c, j| x[(c * spatial + j % spatial, j / spatial)]))
}

/// Inverse of [`unflatten`].
pub fn flatten(x: &Matrix, spatial: usize) -> Result<Matrix> {
    if spatial == 0 || x.cols() % spatial != 0 {
        return Err(shape_err!("{} columns are not a multiple of spatial size {spatial}", x.cols()));
    }
    let n = x.cols() / spatial;
    Ok(Matrix::from_fn(x.rows() * spatial, n, |f, j| x[(f / spatial, j * spatial + f % spatial)]))
}

impl Network {
    pub fn new(in_channels: usize, in_spatial: usize, layers: Vec<Layer>) -> Result<Self> {
        if in_channels == 0 || in_spatial == 0 {
            return Err(invalid!("network input must be non-empty"));
        }
        let mut shapes = vec![(in_channels, in_spatial)];
        let (mut rows, mut spatial) = (in_channels, in_spatial);
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Affine(a) => {
                    if a.b.len() != a.w.rows() {
                        return Err(shape_err!("layer {i}: bias length {} for {} outputs", a.b.len(), a.w.rows()));
                    }
                    match &a.conv {
                        Some(g) => {
                            g.validate()?;
                            if g.in_channels != rows || g.in_spatial() != spatial || g.receptive() != a.w.cols() {
                                return Err(shape_err!("layer {i}: conv geometry {g:?} does not fit input {rows}x{spatial} and weight {:?}", a.w.shape()));
                            }
                            spatial = g.out_spatial();
                        }
                        None => {
                            if spatial != 1 || a.w.cols() != rows {
                                return Err(shape_err!("layer {i}: weight {:?} does not fit input {rows}x{spatial}", a.w.shape()));
                            }
                        }
                    }
                    rows = a.w.rows();
                }
                Layer::Norm(n) => {
                    if n.channels() != rows {
                        return Err(shape_err!("layer {i}: norm over {} channels, input has {rows}", n.channels()));
                    }
                    if !(n.eps > 0.0) || n.pop_var.iter().any(|v| *v < 0.0) {
                        return Err(invalid!("layer {i}: eps must be positive and population variances non-negative"));
                    }
                }
                Layer::Relu => {}
                Layer::Flatten => {
                    rows *= spatial;
                    spatial = 1;
                }
            }
            shapes.push((rows, spatial));
        }
        if spatial != 1 {
            return Err(shape_err!("network output must be flat, has spatial size {spatial}"));
        }
        Ok(Self { layers, in_channels, in_spatial, shapes })
    }

    /// Fully connected network. Hidden layers are `linear → norm → ReLU` when
    /// `norm` is given (the linear layer then has no bias) and
    /// `linear → ReLU` otherwise; the last layer is linear with bias.
    pub fn mlp<R: Rng + ?Sized>(widths: &[usize], norm: Option<NormMode>, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(invalid!("an MLP needs at least input and output widths"));
        }
        let mut layers = Vec::new();
        for k in 0..widths.len() - 1 {
            let last = k + 2 == widths.len();
            let with_norm = norm.is_some() && !last;
            layers.push(Layer::Affine(Affine::kaiming(widths[k + 1], widths[k], !with_norm, rng)));
            if last {
                break;
            }
            if let Some(mode) = norm {
                layers.push(Layer::Norm(NormLayer::new(widths[k + 1], mode)));
            }
            layers.push(Layer::Relu);
        }
        Self::new(widths[0], 1, layers)
    }

    /// `conv → [norm] → ReLU → flatten → linear`.
    pub fn conv_net<R: Rng + ?Sized>(
        geom: ConvGeometry,
        channels: usize,
        norm: Option<NormMode>,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        geom.validate()?;
        let mut conv = Affine::kaiming(channels, geom.receptive(), norm.is_none(), rng);
        conv.conv = Some(geom);
        let mut layers = vec![Layer::Affine(conv)];
        if let Some(mode) = norm {
            layers.push(Layer::Norm(NormLayer::new(channels, mode)));
        }
        layers.push(Layer::Relu);
        layers.push(Layer::Flatten);
        let flat = channels * geom.out_spatial();
        layers.push(Layer::Affine(Affine::kaiming(classes, flat, true, rng)));
        Self::new(geom.in_channels, geom.in_spatial(), layers)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_features(&self) -> usize {
        self.in_channels * self.in_spatial
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.in_channels, self.in_spatial)
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().map(|s| s.0).unwrap_or(0)
    }

    /// `(rows, spatial)` of the activation at `position`.
    pub fn shape_at(&self, position: usize) -> (usize, usize) {
        self.shapes[position]
    }

    pub fn blocks(&self) -> Vec<Block> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::Affine(_) = l {
                let norm = matches!(self.layers.get(i + 1), Some(Layer::Norm(_))).then_some(i + 1);
                out.push(Block { affine: i, norm });
            }
        }
        out
    }

    pub fn affine(&self, layer: usize) -> Result<&Affine> {
        match self.layers.get(layer) {
            Some(Layer::Affine(a)) => Ok(a),
            _ => Err(invalid!("layer {layer} is not affine")),
        }
    }

    pub fn affine_mut(&mut self, layer: usize) -> Result<&mut Affine> {
        match self.layers.get_mut(layer) {
            Some(Layer::Affine(a)) => Ok(a),
            _ => Err(invalid!("layer {layer} is not affine")),
        }
    }

    pub fn norm(&self, layer: usize) -> Result<&NormLayer> {
        match self.layers.get(layer) {
            Some(Layer::Norm(n)) => Ok(n),
            _ => Err(invalid!("layer {layer} is not a norm layer")),
        }
    }

    pub fn norm_mut(&mut self, layer: usize) -> Result<&mut NormLayer> {
        match self.layers.get_mut(layer) {
            Some(Layer::Norm(n)) => Ok(n),
            _ => Err(invalid!("layer {layer} is not a norm layer")),
        }
    }

    pub fn norm_layers_mut(&mut self) -> impl Iterator<Item = &mut NormLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Norm(n) => Some(n),
            _ => None,
        })
    }

    pub fn set_renorm_limits(&mut self, r_max: f64, d_max: f64) {
        for n in self.norm_layers_mut() {
            n.r_max = r_max;
            n.d_max = d_max;
        }
    }

    pub fn set_norm_mode(&mut self, mode: NormMode) {
        for n in self.norm_layers_mut() {
            n.mode = mode;
        }
    }

    /// Runs the whole network on `x` (`features × N`).
    pub fn forward(&self, x: &Matrix, train: bool) -> Result<Forward> {
        if x.rows() != self.input_features() {
            return Err(shape_err!("input has {} features, network expects {}", x.rows(), self.input_features()));
        }
        let input = if self.in_spatial == 1 { x.clone() } else { unflatten(x, self.in_channels, self.in_spatial)? };
        self.forward_from(0, input, x.cols(), train)
    }

    /// Runs layers `start..` on an activation given at position `start`.
    pub fn forward_from(&self, start: usize, input: Matrix, batch: usize, train: bool) -> Result<Forward> {
        if start > self.len() {
            return Err(invalid!("start position {start} beyond {} layers", self.len()));
        }
        if batch == 0 {
            return Err(invalid!("empty batch"));
        }
        let (rows, spatial) = self.shapes[start];
        if input.shape() != (rows, batch * spatial) {
            return Err(shape_err!("activation at position {start} should be {}x{}, got {:?}", rows, batch * spatial, input.shape()));
        }
        input.ensure_finite("network input")?;
        let len = self.len();
        let mut acts = vec![Matrix::zeros(0, 0); start];
        let mut cols = vec![None; len];
        let mut norms = vec![None; len];
        acts.push(input);
        for i in start..len {
            let a = &acts[i];
            let out = match &self.layers[i] {
                Layer::Affine(aff) => {
                    if aff.conv.is_some() {
                        let c = aff.unroll(a, batch)?;
                        let h = aff.apply(&c)?;
                        cols[i] = Some(c);
                        h
                    } else {
                        aff.apply(a)?
                    }
                }
                Layer::Norm(n) => {
                    let (y, cache) = n.forward(a, train)?;
                    norms[i] = Some(cache);
                    y
                }
                Layer::Relu => a.map(|v| v.max(0.0)),
                Layer::Flatten => flatten(a, self.shapes[i].1)?,
            };
            out.ensure_finite(&format!("activation after layer {i}"))?;
            acts.push(out);
        }
        Ok(Forward { batch, train, start, acts, cols, norms })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x, false)?.acts.pop().expect("logits"))
    }

    pub fn update_population_stats(&mut self, fwd: &Forward) {
        for (layer, cache) in self.layers.iter_mut().zip(&fwd.norms) {
            if let (Layer::Norm(n), Some(c)) = (layer, cache) {
                n.update_population(c);
            }
        }
    }

    fn check_forward(&self, fwd: &Forward) -> Result<()> {
        if fwd.acts.len() != self.len() + 1 || fwd.norms.len() != self.len() {
            return Err(Error::MissingState("forward cache does not belong to this network".into()));
        }
        for (i, l) in self.layers.iter().enumerate().skip(fwd.start) {
            if matches!(l, Layer::Norm(_)) && fwd.norms[i].is_none() {
                return Err(Error::MissingState(format!("no norm cache for layer {i}")));
            }
        }
        Ok(())
    }

    /// Backward sweep seeded with `seed` at the logits (if any) plus extra
    /// gradients injected at activation positions. Parameter gradients are
    /// produced only when `want_params`; otherwise the sweep stops at the
    /// lowest tap.
    pub fn backward_general(
        &self,
        fwd: &Forward,
        seed: Option<&Matrix>,
        injections: &[(usize, &Matrix)],
        taps: &[usize],
        want_params: bool,
    ) -> Result<Backward> {
        self.check_forward(fwd)?;
        let len = self.len();
        for &(p, m) in injections {
            if p < fwd.start || p > len || m.shape() != fwd.acts[p].shape() {
                return Err(shape_err!("injection at position {p} has shape {:?}", m.shape()));
            }
        }
        if let Some(&p) = taps.iter().find(|&&p| p < fwd.start || p > len) {
            return Err(invalid!("tap position {p} outside the evaluated range"));
        }
        let stop = if want_params { fwd.start } else { taps.iter().copied().min().unwrap_or(len) };
        let mut params = want_params.then(|| ParamGrads::zeros(self));
        let mut tap_out: Vec<Option<Matrix>> = vec![None; taps.len()];
        let mut g: Option<Matrix> = match seed {
            Some(s) => {
                if s.shape() != fwd.logits().shape() {
                    return Err(shape_err!("seed {:?} vs logits {:?}", s.shape(), fwd.logits().shape()));
                }
                Some(s.clone())
            }
            None => None,
        };
        let mut pos = len;
        loop {
            for &(p, m) in injections {
                if p == pos {
                    match &mut g {
                        Some(g) => g.add_scaled(1.0, m)?,
                        None => g = Some(m.clone()),
                    }
                }
            }
            for (t, &p) in taps.iter().enumerate() {
                if p == pos {
                    tap_out[t] = g.clone();
                }
            }
            if pos == stop {
                break;
            }
            let i = pos - 1;
            if let Some(gi) = g.take() {
                let need_input = i > stop || taps.contains(&i);
                g = self.layer_backward(fwd, i, &gi, params.as_mut(), need_input)?;
            }
            pos = i;
        }
        let taps = tap_out
            .into_iter()
            .zip(taps)
            .map(|(m, &p)| m.unwrap_or_else(|| Matrix::zeros(fwd.acts[p].rows(), fwd.acts[p].cols())))
            .collect();
        Ok(Backward { params, taps })
    }

    fn layer_backward(
        &self,
        fwd: &Forward,
        i: usize,
        g: &Matrix,
        params: Option<&mut ParamGrads>,
        need_input: bool,
    ) -> Result<Option<Matrix>> {
        let out = match &self.layers[i] {
            Layer::Affine(a) => {
                let input = fwd.affine_input(i);
                if let Some(p) = params {
                    let (dw, db) = p.affine_mut(i)?;
                    gemm(1.0, g, Op::N, input, Op::T, 1.0, dw)?;
                    for (d, s) in db.iter_mut().zip(g.row_sums()) {
                        *d += s;
                    }
                }
                if !need_input {
                    return Ok(None);
                }
                let mut dcols = Matrix::zeros(a.w.cols(), g.cols());
                gemm(1.0, &a.w, Op::T, g, Op::N, 0.0, &mut dcols)?;
                match &a.conv {
                    Some(geom) => col2im(&dcols, geom, fwd.batch)?,
                    None => dcols,
                }
            }
            Layer::Norm(n) => {
                let cache = fwd.norm_cache(i)?;
                let (dx, dgamma, dbeta) = n.backward(g, cache);
                if let Some(p) = params {
                    let (pg, pb) = p.norm_mut(i)?;
                    pg.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
                    pb.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
                }
                dx
            }
            Layer::Relu => {
                let x = &fwd.acts[i];
                let mut dx = g.clone();
                for (d, &v) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                dx
            }
            Layer::Flatten => {
                let (c, s) = self.shapes[i];
                unflatten(g, c, s)?
            }
        };
        Ok(Some(out))
    }

    /// Gradients of a loss whose logit gradient is `seed`.
    pub fn backward_from_seed(&self, fwd: &Forward, seed: &Matrix) -> Result<ParamGrads> {
        let out = self.backward_general(fwd, Some(seed), &[], &[], true)?;
        Ok(out.params.expect("parameters requested"))
    }

    /// Mean cross-entropy `E_n[L_n]` and its parameter gradients.
    pub fn backward(&self, fwd: &Forward, labels: &[usize]) -> Result<(f64, ParamGrads)> {
        let (loss, seed) = loss::mean_loss_and_grad(fwd.logits(), labels)?;
        Ok((loss, self.backward_from_seed(fwd, &seed)?))
    }

    /// One sweep seeded with `∂L_n/∂z_n = seed` in column `n` only.
    pub fn per_example_sweep(&self, fwd: &Forward, n: usize, seed: &[f64], taps: &[usize]) -> Result<Vec<Matrix>> {
        let logits = fwd.logits();
        if n >= logits.cols() || seed.len() != logits.rows() {
            return Err(invalid!("example {n} or seed length {} out of range", seed.len()));
        }
        let mut s = Matrix::zeros(logits.rows(), logits.cols());
        for (k, &v) in seed.iter().enumerate() {
            s[(k, n)] = v;
        }
        Ok(self.backward_general(fwd, Some(&s), &[], taps, false)?.taps)
    }

    /// `∂L_n/∂(activation at each tap)` for every example `n`, via one
    /// backward sweep per example. `logit_grads` column `n` is `∂L_n/∂z_n`.
    pub fn per_example_backward_seeded(&self, fwd: &Forward, logit_grads: &Matrix, taps: &[usize]) -> Result<PerExampleGrads> {
        if logit_grads.shape() != fwd.logits().shape() {
            return Err(shape_err!("logit gradients {:?} vs logits {:?}", logit_grads.shape(), fwd.logits().shape()));
        }
        let mut d: Vec<Vec<Matrix>> = vec![Vec::with_capacity(fwd.batch); taps.len()];
        for n in 0..fwd.batch {
            let sweep = self.per_example_sweep(fwd, n, &logit_grads.col_vec(n), taps)?;
            for (t, m) in sweep.into_iter().enumerate() {
                d[t].push(m);
            }
        }
        Ok(PerExampleGrads { taps: taps.to_vec(), d })
    }

    pub fn per_example_backward(&self, fwd: &Forward, labels: &[usize], taps: &[usize]) -> Result<PerExampleGrads> {
        let g = loss::per_example_logit_grads(fwd.logits(), labels)?;
        self.per_example_backward_seeded(fwd, &g, taps)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Affine(a) => a.w.len() + if a.has_bias { a.b.len() } else { 0 },
                Layer::Norm(n) => 2 * n.channels(),
                _ => 0,
            })
            .sum()
    }

    /// Trainable parameters in layer order: `w` (row-major) then `b` for
    /// affine layers with a bias, `γ` then `β` for norm layers.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            match l {
                Layer::Affine(a) => {
                    out.extend_from_slice(a.w.as_slice());
                    if a.has_bias {
                        out.extend_from_slice(&a.b);
                    }
                }
                Layer::Norm(n) => {
                    out.extend_from_slice(&n.gamma);
                    out.extend_from_slice(&n.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(shape_err!("{} parameters for a network with {}", p.len(), self.param_count()));
        }
        let mut k = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&p[k..k + dst.len()]);
            k += dst.len();
        };
        for l in &mut self.layers {
            match l {
                Layer::Affine(a) => {
                    take(a.w.as_mut_slice());
                    if a.has_bias {
                        take(&mut a.b);
                    }
                }
                Layer::Norm(n) => {
                    take(&mut n.gamma);
                    take(&mut n.beta);
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Flattens gradients in the order of [`Network::params_flat`].
    pub fn grads_flat(&self, g: &ParamGrads) -> Result<Vec<f64>> {
        if g.layers.len() != self.len() {
            return Err(shape_err!("gradients for {} layers, network has {}", g.layers.len(), self.len()));
        }
        let mut out = Vec::with_capacity(self.param_count());
        for (l, lg) in self.layers.iter().zip(&g.layers) {
            match (l, lg) {
                (Layer::Affine(a), LayerGrad::Affine { w, b }) => {
                    out.extend_from_slice(w.as_slice());
                    if a.has_bias {
                        out.extend_from_slice(b);
                    }
                }
                (Layer::Norm(_), LayerGrad::Norm { gamma, beta }) => {
                    out.extend_from_slice(gamma);
                    out.extend_from_slice(beta);
                }
                (Layer::Relu | Layer::Flatten, LayerGrad::None) => {}
                _ => return Err(shape_err!("gradient kinds do not match layers")),
            }
        }
        Ok(out)
    }
}
