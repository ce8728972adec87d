//! Parameterized building blocks: dense layers, 3-layer MLPs, the LSTM cell
//! and the conv/deconv feature codec.
//!
//! Every parameter struct has a matching `*Vars` struct holding the graph
//! handles produced by `bind`. Binding with `trainable = false` registers the
//! tensors as constants, which is how frozen stages keep weights out of the
//! backward sweep.

use rand::Rng;

use crate::autodiff::{Graph, Padding, Var};
use crate::error::{Result, VredError};
use crate::tensor::Tensor;

/// Flat, ordered view over the tensors of a parameter container.
///
/// `named_tensors`, `tensors_mut` and the bound `vars` must all list tensors in
/// the same order; optimizers rely on it.
pub trait Parameters {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn bind_tensor<'p>(g: &mut Graph<'p>, t: &'p Tensor, trainable: bool) -> Result<Var> {
    if trainable {
        g.param(t)
    } else {
        g.constant_ref(t)
    }
}

fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl DenseParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        DenseParams {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// Uniform init in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        DenseParams {
            weight: Tensor::uniform(&[output, input], bound, rng),
            bias: Tensor::uniform(&[output], bound, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, trainable: bool) -> Result<DenseVars> {
        Ok(DenseVars {
            weight: bind_tensor(g, &self.weight, trainable)?,
            bias: bind_tensor(g, &self.bias, trainable)?,
        })
    }

    /// `weight · x + bias` evaluated outside of any training graph.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let xv = g.constant_ref(x)?;
        let y = vars.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

impl DenseVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(self.weight, x)?;
        g.add_bias(y, self.bias)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight, self.bias]
    }
}

impl Parameters for DenseParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Three dense layers with tanh on the two hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: [DenseParams; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub layers: [DenseVars; 3],
}

impl MlpParams {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        MlpParams {
            layers: [
                DenseParams::zeros(input, hidden),
                DenseParams::zeros(hidden, hidden),
                DenseParams::zeros(hidden, output),
            ],
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        MlpParams {
            layers: [
                DenseParams::init(input, hidden, rng),
                DenseParams::init(hidden, hidden, rng),
                DenseParams::init(hidden, output, rng),
            ],
        }
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, trainable: bool) -> Result<MlpVars> {
        Ok(MlpVars {
            layers: [
                self.layers[0].bind(g, trainable)?,
                self.layers[1].bind(g, trainable)?,
                self.layers[2].bind(g, trainable)?,
            ],
        })
    }

    pub fn forward(&self, x: &Tensor, output: Activation) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let xv = g.constant_ref(x)?;
        let y = vars.forward(&mut g, xv, output)?;
        Ok(g.value(y).clone())
    }
}

impl MlpVars {
    pub fn forward(&self, g: &mut Graph, x: Var, output: Activation) -> Result<Var> {
        let h = self.layers[0].forward(g, x)?;
        let h = g.tanh(h)?;
        let h = self.layers[1].forward(g, h)?;
        let h = g.tanh(h)?;
        let y = self.layers[2].forward(g, h)?;
        output.apply(g, y)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.vars()).collect()
    }
}

impl Parameters for MlpParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.named_tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}

/// LSTM cell. Each gate is a dense map over the concatenation `[x; h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input_gate: DenseParams,
    pub forget_gate: DenseParams,
    pub output_gate: DenseParams,
    pub candidate: DenseParams,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub input_gate: DenseVars,
    pub forget_gate: DenseVars,
    pub output_gate: DenseVars,
    pub candidate: DenseVars,
}

/// Recurrent state; columns are independent sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmStateVars {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(hidden: usize, batch: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[hidden, batch]),
            c: Tensor::zeros(&[hidden, batch]),
        }
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>) -> Result<LstmStateVars> {
        Ok(LstmStateVars {
            h: g.constant_ref(&self.h)?,
            c: g.constant_ref(&self.c)?,
        })
    }
}

impl LstmStateVars {
    pub fn zeros(g: &mut Graph, hidden: usize, batch: usize) -> Result<Self> {
        Ok(LstmStateVars {
            h: g.constant(Tensor::zeros(&[hidden, batch]))?,
            c: g.constant(Tensor::zeros(&[hidden, batch]))?,
        })
    }

    pub fn values(&self, g: &Graph) -> LstmState {
        LstmState {
            h: g.value(self.h).clone(),
            c: g.value(self.c).clone(),
        }
    }
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let d = || DenseParams::zeros(input + hidden, hidden);
        LstmParams {
            input_gate: d(),
            forget_gate: d(),
            output_gate: d(),
            candidate: d(),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut d = || DenseParams::init(input + hidden, hidden, rng);
        LstmParams {
            input_gate: d(),
            forget_gate: d(),
            output_gate: d(),
            candidate: d(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.input_gate.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.input_gate.input_dim() - self.hidden_dim()
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, trainable: bool) -> Result<LstmVars> {
        Ok(LstmVars {
            input_gate: self.input_gate.bind(g, trainable)?,
            forget_gate: self.forget_gate.bind(g, trainable)?,
            output_gate: self.output_gate.bind(g, trainable)?,
            candidate: self.candidate.bind(g, trainable)?,
        })
    }

    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<LstmState> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let s = state.bind(&mut g)?;
        let xv = g.constant_ref(x)?;
        let next = vars.step(&mut g, xv, s)?;
        Ok(next.values(&g))
    }
}

impl LstmVars {
    /// `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`.
    pub fn step(&self, g: &mut Graph, x: Var, s: LstmStateVars) -> Result<LstmStateVars> {
        let xh = g.concat(&[x, s.h])?;
        let i = self.input_gate.forward(g, xh)?;
        let i = g.sigmoid(i)?;
        let f = self.forget_gate.forward(g, xh)?;
        let f = g.sigmoid(f)?;
        let o = self.output_gate.forward(g, xh)?;
        let o = g.sigmoid(o)?;
        let cand = self.candidate.forward(g, xh)?;
        let cand = g.tanh(cand)?;
        let keep = g.mul(f, s.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok(LstmStateVars { h, c })
    }

    pub fn vars(&self) -> Vec<Var> {
        [
            &self.input_gate,
            &self.forget_gate,
            &self.output_gate,
            &self.candidate,
        ]
        .iter()
        .flat_map(|d| d.vars())
        .collect()
    }
}

impl Parameters for LstmParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("input_gate", self.input_gate.named_tensors());
        out.extend(prefixed("forget_gate", self.forget_gate.named_tensors()));
        out.extend(prefixed("output_gate", self.output_gate.named_tensors()));
        out.extend(prefixed("candidate", self.candidate.named_tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.input_gate.tensors_mut();
        out.extend(self.forget_gate.tensors_mut());
        out.extend(self.output_gate.tensors_mut());
        out.extend(self.candidate.tensors_mut());
        out
    }
}

/// Zero padding that keeps `conv1d` at exactly one frame per `stride` samples.
/// Odd totals put the extra sample on the right.
pub fn codec_padding(kernel: usize, stride: usize) -> Result<Padding> {
    if stride == 0 || kernel < stride {
        return Err(VredError::Config(format!(
            "feature codec needs kernel >= stride > 0, got kernel {kernel}, stride {stride}"
        )));
    }
    let total = kernel - stride;
    Ok(Padding {
        left: total / 2,
        right: total - total / 2,
    })
}

/// Learnable strided conv front end and its transposed-conv back end.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvCodecParams {
    /// `[C x 1 x K]`
    pub enc_kernels: Tensor,
    /// `[C x 1 x K]`, read as `[C_in x C_out x K]` by the transposed conv.
    pub dec_kernels: Tensor,
    pub enc_bias: Option<Tensor>,
    pub dec_bias: Option<Tensor>,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvCodecVars {
    pub enc_kernels: Var,
    pub dec_kernels: Var,
    pub enc_bias: Option<Var>,
    pub dec_bias: Option<Var>,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvCodecParams {
    pub fn zeros(channels: usize, kernel: usize, stride: usize, bias: bool) -> Result<Self> {
        codec_padding(kernel, stride)?;
        Ok(ConvCodecParams {
            enc_kernels: Tensor::zeros(&[channels, 1, kernel]),
            dec_kernels: Tensor::zeros(&[channels, 1, kernel]),
            enc_bias: bias.then(|| Tensor::zeros(&[channels])),
            dec_bias: bias.then(|| Tensor::zeros(&[1])),
            stride,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        codec_padding(kernel, stride)?;
        let enc_bound = 1.0 / (kernel as f64).sqrt();
        // Each output sample of the transposed conv sums about C*K/S taps.
        let dec_fan_in = (channels * kernel) as f64 / stride as f64;
        let dec_bound = 1.0 / dec_fan_in.sqrt();
        Ok(ConvCodecParams {
            enc_kernels: Tensor::uniform(&[channels, 1, kernel], enc_bound, rng),
            dec_kernels: Tensor::uniform(&[channels, 1, kernel], dec_bound, rng),
            enc_bias: bias.then(|| Tensor::uniform(&[channels], enc_bound, rng)),
            dec_bias: bias.then(|| Tensor::uniform(&[1], dec_bound, rng)),
            stride,
        })
    }

    pub fn channels(&self) -> usize {
        self.enc_kernels.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.enc_kernels.shape()[2]
    }

    pub fn padding(&self) -> Result<Padding> {
        codec_padding(self.kernel(), self.stride)
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, trainable: bool) -> Result<ConvCodecVars> {
        Ok(ConvCodecVars {
            enc_kernels: bind_tensor(g, &self.enc_kernels, trainable)?,
            dec_kernels: bind_tensor(g, &self.dec_kernels, trainable)?,
            enc_bias: self
                .enc_bias
                .as_ref()
                .map(|b| bind_tensor(g, b, trainable))
                .transpose()?,
            dec_bias: self
                .dec_bias
                .as_ref()
                .map(|b| bind_tensor(g, b, trainable))
                .transpose()?,
            stride: self.stride,
            padding: self.padding()?,
        })
    }

    /// `[1 x L]` audio to `[C x L/S]` features.
    pub fn encode(&self, audio: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let x = g.constant_ref(audio)?;
        let f = vars.encode(&mut g, x)?;
        Ok(g.value(f).clone())
    }

    /// `[C x F]` features to `[1 x F*S]` audio (unclamped).
    pub fn decode(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let f = g.constant_ref(features)?;
        let y = vars.decode(&mut g, f)?;
        Ok(g.value(y).clone())
    }
}

impl ConvCodecVars {
    /// Rebuilds handles from a flat list ordered like [`ConvCodecVars::vars`],
    /// taking structure (bias presence, stride) from `params`.
    pub fn from_vars(params: &ConvCodecParams, v: &[Var]) -> Result<ConvCodecVars> {
        let expected = 2 + params.enc_bias.is_some() as usize + params.dec_bias.is_some() as usize;
        if v.len() != expected {
            return Err(VredError::Contract(format!(
                "conv codec needs {expected} leaves, got {}",
                v.len()
            )));
        }
        let mut it = v[2..].iter().copied();
        Ok(ConvCodecVars {
            enc_kernels: v[0],
            dec_kernels: v[1],
            enc_bias: params.enc_bias.as_ref().and_then(|_| it.next()),
            dec_bias: params.dec_bias.as_ref().and_then(|_| it.next()),
            stride: params.stride,
            padding: params.padding()?,
        })
    }

    pub fn encode(&self, g: &mut Graph, audio: Var) -> Result<Var> {
        let s = g.shape(audio);
        if s.len() != 2 || s[0] != 1 || s[1] % self.stride != 0 || s[1] == 0 {
            return Err(VredError::Config(format!(
                "conv_encode needs [1 x L] audio with L a positive multiple of {}, got {:?}",
                self.stride, s
            )));
        }
        let f = g.conv1d(audio, self.enc_kernels, self.stride, self.padding)?;
        match self.enc_bias {
            Some(b) => g.add_bias(f, b),
            None => Ok(f),
        }
    }

    pub fn decode(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let y = g.conv_transpose1d(features, self.dec_kernels, self.stride, self.padding)?;
        match self.dec_bias {
            Some(b) => g.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.enc_kernels, self.dec_kernels];
        v.extend(self.enc_bias);
        v.extend(self.dec_bias);
        v
    }
}

impl Parameters for ConvCodecParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("enc_kernels".to_string(), &self.enc_kernels),
            ("dec_kernels".to_string(), &self.dec_kernels),
        ];
        if let Some(b) = &self.enc_bias {
            v.push(("enc_bias".into(), b));
        }
        if let Some(b) = &self.dec_bias {
            v.push(("dec_bias".into(), b));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.enc_kernels, &mut self.dec_kernels];
        if let Some(b) = &mut self.enc_bias {
            v.push(b);
        }
        if let Some(b) = &mut self.dec_bias {
            v.push(b);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_difference_check, DEFAULT_EPS};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let w = Tensor::uniform(g.shape(y), 1.0, &mut rng(seed));
        let wv = g.constant(w)?;
        let p = g.mul(y, wv)?;
        g.sum(p)
    }

    #[test]
    fn dense_identity_and_bias_only() {
        let mut d = DenseParams::zeros(3, 3);
        for i in 0..3 {
            d.weight.data_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::vector(vec![0.5, -1.0, 2.0]);
        assert_eq!(d.forward(&x).unwrap(), x);

        let mut d = DenseParams::zeros(3, 2);
        d.bias = Tensor::vector(vec![4.0, -3.0]);
        assert_eq!(d.forward(&x).unwrap().data(), &[4.0, -3.0]);
        assert!(d.forward(&Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn mlp_zero_params() {
        let m = MlpParams::zeros(4, 8, 5);
        let x = Tensor::column(vec![1.0, 2.0, 3.0, 4.0]);
        let y = m.forward(&x, Activation::Sigmoid).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        let y = m.forward(&x, Activation::Identity).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_zero_params() {
        let p = LstmParams::zeros(3, 4);
        let x = Tensor::column(vec![1.0, -1.0, 0.5]);
        let s = p.step(&x, &LstmState::zeros(4, 1)).unwrap();
        assert!(s.c.data().iter().all(|&v| v == 0.0));
        assert!(s.h.data().iter().all(|&v| v == 0.0));

        let s = LstmState {
            h: Tensor::zeros(&[4, 1]),
            c: Tensor::full(&[4, 1], 2.0),
        };
        let s = p.step(&x, &s).unwrap();
        assert!(s.c.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn lstm_hidden_strictly_bounded() {
        let mut r = rng(5);
        let p = LstmParams::init(3, 6, &mut r);
        let mut s = LstmState::zeros(6, 1);
        for _ in 0..50 {
            let x = Tensor::uniform(&[3, 1], 50.0, &mut r);
            s = p.step(&x, &s).unwrap();
            assert!(s.h.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn dense_and_mlp_gradients() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let d = DenseParams::init(4, 3, &mut r);
            let m = MlpParams::init(3, 5, 2, &mut r);
            let x = Tensor::uniform(&[4, 2], 1.0, &mut r);
            let mut params = vec![x];
            params.extend(d.named_tensors().into_iter().map(|(_, t)| t.clone()));
            params.extend(m.named_tensors().into_iter().map(|(_, t)| t.clone()));
            let report = finite_difference_check(&params, DEFAULT_EPS, |g, v| {
                let dv = DenseVars {
                    weight: v[1],
                    bias: v[2],
                };
                let layers = [
                    DenseVars {
                        weight: v[3],
                        bias: v[4],
                    },
                    DenseVars {
                        weight: v[5],
                        bias: v[6],
                    },
                    DenseVars {
                        weight: v[7],
                        bias: v[8],
                    },
                ];
                let h = dv.forward(g, v[0])?;
                let y = MlpVars { layers }.forward(g, h, Activation::Sigmoid)?;
                project(g, y, seed + 1000)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn lstm_bptt_gradient_five_steps() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let p = LstmParams::init(3, 4, &mut r);
            let xs: Vec<Tensor> = (0..5)
                .map(|_| Tensor::uniform(&[3, 1], 1.0, &mut r))
                .collect();
            let params: Vec<Tensor> = p
                .named_tensors()
                .into_iter()
                .map(|(_, t)| t.clone())
                .collect();
            let report = finite_difference_check(&params, DEFAULT_EPS, |g, v| {
                let d = |i: usize| DenseVars {
                    weight: v[2 * i],
                    bias: v[2 * i + 1],
                };
                let lstm = LstmVars {
                    input_gate: d(0),
                    forget_gate: d(1),
                    output_gate: d(2),
                    candidate: d(3),
                };
                let mut s = LstmStateVars::zeros(g, 4, 1)?;
                for x in &xs {
                    let xv = g.constant(x.clone())?;
                    s = lstm.step(g, xv, s)?;
                }
                let hc = g.concat(&[s.h, s.c])?;
                project(g, hc, seed + 7)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn codec_shapes() {
        let p = ConvCodecParams::init(32, 88, 44, false, &mut rng(1)).unwrap();
        let audio = Tensor::uniform(&[1, 880], 1.0, &mut rng(2));
        let f = p.encode(&audio).unwrap();
        assert_eq!(f.shape(), &[32, 20]);
        assert_eq!(p.decode(&f).unwrap().shape(), &[1, 880]);

        let one = Tensor::zeros(&[1, 44]);
        assert_eq!(p.encode(&one).unwrap().shape(), &[32, 1]);
        assert!(p.encode(&Tensor::zeros(&[1, 45])).is_err());

        let z = ConvCodecParams::zeros(32, 88, 44, false).unwrap();
        assert!(z.encode(&audio).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(z.decode(&f).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn codec_asymmetric_padding_round_trip() {
        // Kernel 21, stride 10: 11 samples of padding split 5/6.
        assert_eq!(
            codec_padding(21, 10).unwrap(),
            Padding { left: 5, right: 6 }
        );
        let p = ConvCodecParams::init(4, 21, 10, true, &mut rng(3)).unwrap();
        for frames in [1usize, 3, 17] {
            let audio = Tensor::zeros(&[1, frames * 10]);
            let f = p.encode(&audio).unwrap();
            assert_eq!(f.shape(), &[4, frames]);
            assert_eq!(p.decode(&f).unwrap().shape(), &[1, frames * 10]);
        }
        assert!(codec_padding(8, 10).is_err());
    }

    #[test]
    fn codec_gradients() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let p = ConvCodecParams::init(3, 8, 4, true, &mut r).unwrap();
            let audio = Tensor::uniform(&[1, 24], 1.0, &mut r);
            let params: Vec<Tensor> = p
                .named_tensors()
                .into_iter()
                .map(|(_, t)| t.clone())
                .collect();
            let pad = p.padding().unwrap();
            let report = finite_difference_check(&params, DEFAULT_EPS, |g, v| {
                let vars = ConvCodecVars {
                    enc_kernels: v[0],
                    dec_kernels: v[1],
                    enc_bias: Some(v[2]),
                    dec_bias: Some(v[3]),
                    stride: 4,
                    padding: pad,
                };
                let a = g.constant(audio.clone())?;
                let f = vars.encode(g, a)?;
                let f = g.tanh(f)?;
                let y = vars.decode(g, f)?;
                let d = g.sub(y, a)?;
                let sq = g.square(d)?;
                g.sum(sq)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }
}
