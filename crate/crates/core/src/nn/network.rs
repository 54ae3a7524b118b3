use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{Array2, Array4, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::kernels as k;
use crate::error::{Error, Result};

/// One stage of a sequential network. Parameterized layers hold offsets into
/// the owning [`Network`]'s flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv3x3 {
        cin: usize,
        cout: usize,
        weight: usize,
        bias: Option<usize>,
    },
    Linear {
        fin: usize,
        fout: usize,
        weight: usize,
        bias: Option<usize>,
    },
    Elu,
    Sigmoid,
    AvgPool2,
    Upsample2,
    AdaptiveAvgPool(usize),
    /// (n, c, h, w) -> (n, c*h*w, 1, 1)
    Flatten,
    /// (n, c*h*w, 1, 1) -> (n, c, h, w)
    Reshape(usize, usize, usize),
    SaveSkip(usize),
    AddSkip(usize),
}

impl Layer {
    fn describe(&self) -> String {
        match self {
            Layer::Conv3x3 { cin, cout, bias, .. } => format!("conv3x3({cin},{cout},{})", bias.is_some()),
            Layer::Linear { fin, fout, bias, .. } => format!("linear({fin},{fout},{})", bias.is_some()),
            Layer::Elu => "elu".into(),
            Layer::Sigmoid => "sigmoid".into(),
            Layer::AvgPool2 => "avgpool2".into(),
            Layer::Upsample2 => "upsample2".into(),
            Layer::AdaptiveAvgPool(o) => format!("adaptivepool({o})"),
            Layer::Flatten => "flatten".into(),
            Layer::Reshape(c, h, w) => format!("reshape({c},{h},{w})"),
            Layer::SaveSkip(s) => format!("save({s})"),
            Layer::AddSkip(s) => format!("add({s})"),
        }
    }
}

/// Activations recorded during a forward pass: `acts[i]` is the input of
/// layer `i`, the last entry is the output of the final executed layer.
#[derive(Debug, Clone)]
pub struct Tape {
    acts: Vec<Array4<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array4<f64> {
        self.acts.last().expect("tape never empty")
    }

    /// Output of layer `i`.
    pub fn layer_output(&self, i: usize) -> &Array4<f64> {
        &self.acts[i + 1]
    }

    pub fn len(&self) -> usize {
        self.acts.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sequential network with a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    params: Vec<f64>,
}

impl Network {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape {
                expected: format!("{} parameters", self.params.len()),
                actual: format!("{} parameters", params.len()),
            });
        }
        self.params = params;
        Ok(())
    }

    pub fn architecture(&self) -> String {
        let mut s = String::new();
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                s.push('|');
            }
            s.push_str(&l.describe());
        }
        s
    }

    /// Rebuilds a network from an [`architecture`](Self::architecture)
    /// string and a matching flat parameter vector.
    pub fn from_architecture(arch: &str, params: Vec<f64>) -> Result<Network> {
        let bad = |part: &str| Error::Config(format!("unrecognized layer {part:?} in architecture"));
        let mut layers = Vec::new();
        let mut off = 0usize;
        for part in arch.split('|').filter(|p| !p.is_empty()) {
            let (name, args) = match part.split_once('(') {
                Some((n, rest)) => (n, rest.strip_suffix(')').ok_or_else(|| bad(part))?),
                None => (part, ""),
            };
            let args: Vec<&str> = args.split(',').filter(|a| !a.is_empty()).collect();
            let num = |i: usize| -> Result<usize> { args.get(i).and_then(|a| a.parse().ok()).ok_or_else(|| bad(part)) };
            let flag = |i: usize| -> Result<bool> { args.get(i).and_then(|a| a.parse().ok()).ok_or_else(|| bad(part)) };
            let layer = match name {
                "conv3x3" => {
                    let (cin, cout, has_bias) = (num(0)?, num(1)?, flag(2)?);
                    let weight = off;
                    off += cin * cout * 9;
                    let bias = has_bias.then(|| {
                        off += cout;
                        off - cout
                    });
                    Layer::Conv3x3 {
                        cin,
                        cout,
                        weight,
                        bias,
                    }
                }
                "linear" => {
                    let (fin, fout, has_bias) = (num(0)?, num(1)?, flag(2)?);
                    let weight = off;
                    off += fin * fout;
                    let bias = has_bias.then(|| {
                        off += fout;
                        off - fout
                    });
                    Layer::Linear {
                        fin,
                        fout,
                        weight,
                        bias,
                    }
                }
                "elu" => Layer::Elu,
                "sigmoid" => Layer::Sigmoid,
                "avgpool2" => Layer::AvgPool2,
                "upsample2" => Layer::Upsample2,
                "adaptivepool" => Layer::AdaptiveAvgPool(num(0)?),
                "flatten" => Layer::Flatten,
                "reshape" => Layer::Reshape(num(0)?, num(1)?, num(2)?),
                "save" => Layer::SaveSkip(num(0)?),
                "add" => Layer::AddSkip(num(0)?),
                _ => return Err(bad(part)),
            };
            layers.push(layer);
        }
        if off != params.len() {
            return Err(Error::Shape {
                expected: format!("{off} parameters for {arch}"),
                actual: format!("{} parameters", params.len()),
            });
        }
        Ok(Network { layers, params })
    }

    pub fn architecture_hash(&self) -> String {
        hex_digest(self.architecture().as_bytes())
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        let digest = h.finalize();
        let mut s = String::with_capacity(64);
        for b in digest.iter() {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    /// Copy of the first `n_layers` layers together with the parameters they
    /// own. Parameters are allocated in layer order, so the prefix is a slice.
    pub fn prefix(&self, n_layers: usize) -> Network {
        let layers = self.layers[..n_layers].to_vec();
        let end = layers
            .iter()
            .filter_map(|l| match *l {
                Layer::Conv3x3 {
                    cin,
                    cout,
                    weight,
                    bias,
                } => Some(bias.map(|b| b + cout).unwrap_or(weight + cin * cout * 9)),
                Layer::Linear {
                    fin,
                    fout,
                    weight,
                    bias,
                } => Some(bias.map(|b| b + fout).unwrap_or(weight + fin * fout)),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        Network {
            layers,
            params: self.params[..end].to_vec(),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_range(x, self.layers.len())
    }

    /// Runs layers `[0, end)` without recording.
    pub fn forward_range(&self, x: &Array4<f64>, end: usize) -> Array4<f64> {
        let mut skips: HashMap<usize, Array4<f64>> = HashMap::new();
        let mut cur = x.clone();
        for layer in &self.layers[..end] {
            cur = self.apply(layer, cur, &mut skips);
        }
        cur
    }

    pub fn forward_tape(&self, x: &Array4<f64>) -> Tape {
        self.forward_tape_range(x, self.layers.len())
    }

    pub fn forward_tape_range(&self, x: &Array4<f64>, end: usize) -> Tape {
        let mut skips: HashMap<usize, Array4<f64>> = HashMap::new();
        let mut acts = Vec::with_capacity(end + 1);
        acts.push(x.clone());
        for layer in &self.layers[..end] {
            let next = self.apply(layer, acts.last().unwrap().clone(), &mut skips);
            acts.push(next);
        }
        Tape { acts }
    }

    fn apply(&self, layer: &Layer, x: Array4<f64>, skips: &mut HashMap<usize, Array4<f64>>) -> Array4<f64> {
        match *layer {
            Layer::Conv3x3 {
                cin,
                cout,
                weight,
                bias,
            } => {
                let (w, b) = self.conv_views(cin, cout, weight, bias);
                k::conv3x3_forward(&x, w, b)
            }
            Layer::Linear {
                fin,
                fout,
                weight,
                bias,
            } => {
                let n = x.dim().0;
                let x2 = to_2d(x);
                let (w, b) = self.linear_views(fin, fout, weight, bias);
                to_4d(k::linear_forward(&x2, w, b), n)
            }
            Layer::Elu => x.mapv_into(k::elu),
            Layer::Sigmoid => x.mapv_into(k::sigmoid),
            Layer::AvgPool2 => k::avg_pool2_forward(&x),
            Layer::Upsample2 => k::upsample2_forward(&x),
            Layer::AdaptiveAvgPool(o) => k::adaptive_avg_pool_forward(&x, o),
            Layer::Flatten => {
                let (n, c, h, w) = x.dim();
                x.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, c * h * w, 1, 1))
                    .expect("flatten")
            }
            Layer::Reshape(c, h, w) => {
                let n = x.dim().0;
                x.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, c, h, w))
                    .expect("reshape")
            }
            Layer::SaveSkip(s) => {
                skips.insert(s, x.clone());
                x
            }
            Layer::AddSkip(s) => {
                let saved = skips.get(&s).expect("skip saved before use");
                x + saved
            }
        }
    }

    fn conv_views(
        &self,
        cin: usize,
        cout: usize,
        weight: usize,
        bias: Option<usize>,
    ) -> (ArrayView2<'_, f64>, Option<ArrayView1<'_, f64>>) {
        let w = ArrayView2::from_shape((cout, cin * 9), &self.params[weight..weight + cout * cin * 9])
            .expect("conv weight view");
        let b = bias.map(|o| ArrayView1::from(&self.params[o..o + cout]));
        (w, b)
    }

    fn linear_views(
        &self,
        fin: usize,
        fout: usize,
        weight: usize,
        bias: Option<usize>,
    ) -> (ArrayView2<'_, f64>, Option<ArrayView1<'_, f64>>) {
        let w =
            ArrayView2::from_shape((fout, fin), &self.params[weight..weight + fout * fin]).expect("linear weight view");
        let b = bias.map(|o| ArrayView1::from(&self.params[o..o + fout]));
        (w, b)
    }

    /// Backpropagates through the recorded layers.
    ///
    /// `dy` is the gradient at the tape output (may be `None` when all signal
    /// enters through `injections`, which add gradients at the output of the
    /// given layer indices). Parameter gradients are accumulated into `grad`
    /// when provided. Returns the gradient with respect to the tape input.
    pub fn backward(
        &self,
        tape: &Tape,
        dy: Option<Array4<f64>>,
        injections: &[(usize, &Array4<f64>)],
        mut grad: Option<&mut [f64]>,
    ) -> Array4<f64> {
        let n_layers = tape.len();
        let mut g = dy.unwrap_or_else(|| Array4::zeros(tape.output().dim()));
        let mut skip_grads: HashMap<usize, Array4<f64>> = HashMap::new();
        for i in (0..n_layers).rev() {
            for (idx, inj) in injections {
                if *idx == i {
                    g += *inj;
                }
            }
            let x = &tape.acts[i];
            g = match self.layers[i] {
                Layer::Conv3x3 {
                    cin,
                    cout,
                    weight,
                    bias,
                } => {
                    let (w, _) = self.conv_views(cin, cout, weight, bias);
                    match grad.as_deref_mut() {
                        Some(gbuf) => {
                            let (dw, db) = split_grads(gbuf, weight, cout, cin * 9, bias);
                            k::conv3x3_backward(x, w, &g, Some(dw), db)
                        }
                        None => k::conv3x3_backward(x, w, &g, None, None),
                    }
                }
                Layer::Linear {
                    fin,
                    fout,
                    weight,
                    bias,
                } => {
                    let n = x.dim().0;
                    let x2 = to_2d(x.clone());
                    let g2 = to_2d(g);
                    let (w, _) = self.linear_views(fin, fout, weight, bias);
                    let dx = match grad.as_deref_mut() {
                        Some(gbuf) => {
                            let (dw, db) = split_grads(gbuf, weight, fout, fin, bias);
                            k::linear_backward(&x2, w, &g2, Some(dw), db)
                        }
                        None => k::linear_backward(&x2, w, &g2, None, None),
                    };
                    to_4d(dx, n)
                }
                Layer::Elu => {
                    ndarray::Zip::from(&mut g)
                        .and(x)
                        .for_each(|gv, &xv| *gv *= k::elu_grad(xv));
                    g
                }
                Layer::Sigmoid => {
                    ndarray::Zip::from(&mut g).and(x).for_each(|gv, &xv| {
                        let s = k::sigmoid(xv);
                        *gv *= s * (1.0 - s);
                    });
                    g
                }
                Layer::AvgPool2 => k::avg_pool2_backward(x.dim(), &g),
                Layer::Upsample2 => k::upsample2_backward(&g),
                Layer::AdaptiveAvgPool(_) => k::adaptive_avg_pool_backward(x.dim(), &g),
                Layer::Flatten | Layer::Reshape(..) => g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(x.dim())
                    .expect("reshape grad"),
                Layer::AddSkip(s) => {
                    skip_grads.insert(s, g.clone());
                    g
                }
                Layer::SaveSkip(s) => match skip_grads.remove(&s) {
                    Some(sg) => g + sg,
                    None => g,
                },
            };
        }
        g
    }
}

fn split_grads(
    gbuf: &mut [f64],
    weight: usize,
    rows: usize,
    cols: usize,
    bias: Option<usize>,
) -> (ArrayViewMut2<'_, f64>, Option<ArrayViewMut1<'_, f64>>) {
    // weights are always allocated before their bias
    let (head, tail) = gbuf.split_at_mut(weight + rows * cols);
    let dw = ArrayViewMut2::from_shape((rows, cols), &mut head[weight..]).expect("grad view");
    let db = bias.map(|b| {
        let off = b - (weight + rows * cols);
        ArrayViewMut1::from(&mut tail[off..off + rows])
    });
    (dw, db)
}

fn to_2d(x: Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c * h * w))
        .expect("to 2d")
}

fn to_4d(x: Array2<f64>, n: usize) -> Array4<f64> {
    let f = x.ncols();
    x.into_shape_with_order((n, f, 1, 1)).expect("to 4d")
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Incrementally assembles a [`Network`], initializing parameters as layers
/// are appended.
pub struct NetworkBuilder<'r, R: Rng> {
    layers: Vec<Layer>,
    params: Vec<f64>,
    rng: &'r mut R,
}

impl<'r, R: Rng> NetworkBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            layers: Vec::new(),
            params: Vec::new(),
            rng,
        }
    }

    fn alloc_normal(&mut self, count: usize, std: f64) -> usize {
        let off = self.params.len();
        let dist = Normal::new(0.0, std).expect("valid std");
        for _ in 0..count {
            self.params.push(dist.sample(self.rng));
        }
        off
    }

    fn alloc_zeros(&mut self, count: usize) -> usize {
        let off = self.params.len();
        self.params.resize(off + count, 0.0);
        off
    }

    /// He-normal initialized 3x3 convolution.
    pub fn conv(self, cin: usize, cout: usize, bias: bool) -> Self {
        self.conv_std(cin, cout, bias, (2.0 / (cin * 9) as f64).sqrt())
    }

    pub fn conv_std(mut self, cin: usize, cout: usize, bias: bool, std: f64) -> Self {
        let weight = self.alloc_normal(cin * cout * 9, std);
        let bias = bias.then(|| self.alloc_zeros(cout));
        self.layers.push(Layer::Conv3x3 {
            cin,
            cout,
            weight,
            bias,
        });
        self
    }

    pub fn linear(self, fin: usize, fout: usize, bias: bool) -> Self {
        self.linear_std(fin, fout, bias, (1.0 / fin as f64).sqrt())
    }

    pub fn linear_std(mut self, fin: usize, fout: usize, bias: bool, std: f64) -> Self {
        let weight = self.alloc_normal(fin * fout, std);
        let bias = bias.then(|| self.alloc_zeros(fout));
        self.layers.push(Layer::Linear {
            fin,
            fout,
            weight,
            bias,
        });
        self
    }

    pub fn layer(mut self, layer: Layer) -> Self {
        debug_assert!(!matches!(layer, Layer::Conv3x3 { .. } | Layer::Linear { .. }));
        self.layers.push(layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn build(self) -> Network {
        Network {
            layers: self.layers,
            params: self.params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn architecture_string_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = toy(&mut rng);
        let back = Network::from_architecture(&net.architecture(), net.params().to_vec()).unwrap();
        assert_eq!(back, net);
        assert!(Network::from_architecture(&net.architecture(), vec![0.0; 3]).is_err());
    }

    fn toy(rng: &mut ChaCha8Rng) -> Network {
        NetworkBuilder::new(rng)
            .conv(2, 3, true)
            .layer(Layer::Elu)
            .layer(Layer::SaveSkip(0))
            .layer(Layer::AvgPool2)
            .conv(3, 3, true)
            .layer(Layer::Elu)
            .layer(Layer::Upsample2)
            .layer(Layer::AddSkip(0))
            .layer(Layer::AdaptiveAvgPool(2))
            .layer(Layer::Flatten)
            .linear(12, 5, true)
            .layer(Layer::Sigmoid)
            .build()
    }

    fn objective(net: &Network, x: &Array4<f64>, w: &Array4<f64>) -> f64 {
        (&net.forward(x) * w).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = toy(&mut rng);
        let x = Array4::from_shape_fn((2, 2, 4, 4), |(a, b, c, d)| {
            ((a * 31 + b * 17 + c * 5 + d) as f64 * 0.7).sin()
        });
        let wout = Array4::from_shape_fn((2, 5, 1, 1), |(a, b, _, _)| ((a * 5 + b) as f64).cos());
        let tape = net.forward_tape(&x);
        let mut grad = vec![0.0; net.num_params()];
        let dx = net.backward(&tape, Some(wout.clone()), &[], Some(&mut grad));

        let h = 1e-5;
        for i in (0..net.num_params()).step_by(7) {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let up = objective(&p, &x, &wout);
            p.params_mut()[i] -= 2.0 * h;
            let dn = objective(&p, &x, &wout);
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {i}: {fd} vs {}",
                grad[i]
            );
        }
        for idx in [(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 3, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let up = objective(&net, &xp, &wout);
            xp[idx] -= 2.0 * h;
            let dn = objective(&net, &xp, &wout);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn prefix_keeps_owned_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = toy(&mut rng);
        let pre = net.prefix(6);
        assert_eq!(pre.num_params(), 2 * 3 * 9 + 3 + 3 * 3 * 9 + 3);
        let x = Array4::from_elem((1, 2, 4, 4), 0.3);
        assert_eq!(pre.forward(&x), net.forward_range(&x, 6));
    }
}
