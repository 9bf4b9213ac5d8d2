//! The sequence regressor: optional embedding projection, two masked LSTM
//! layers, time attention, demographic MLP and a dense head on `c ⊕ d`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::SequenceSample;
use crate::error::{Error, Result};
use crate::nnet::layers::{relu, relu_backward, Dense, LstmLayer, LstmTrace};
use crate::nnet::ops::{l1_l2_penalty, softmax, softmax_backward};
use crate::nnet::{Adadelta, Param, Parameterized, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Embedding, attention over time, feature importance available.
    Interpretable,
    /// Masked two-layer LSTM summarized by its last hidden state.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// LSTM hidden size N; also the embedding width.
    pub hidden: usize,
    pub demo_hidden: [usize; 2],
    pub head_hidden: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub l1: f64,
    pub l2: f64,
    pub optimizer: Adadelta,
    pub seed: u64,
    /// Softmax over each h_t's components instead of across time.
    pub literal_attention: bool,
    /// Multiplier on the Glorot range of the embedding initializer.
    pub embedding_init_scale: f64,
    /// Parameter-name prefixes left untouched during fine-tuning.
    pub frozen: Vec<String>,
    /// Fine-tuning epochs (0 keeps the base weights).
    pub finetune_epochs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            demo_hidden: [32, 16],
            head_hidden: 32,
            max_epochs: 200,
            batch_size: 32,
            patience: 10,
            l1: 1e-5,
            l2: 1e-5,
            optimizer: Adadelta::default(),
            seed: 11,
            literal_attention: false,
            embedding_init_scale: 0.05,
            frozen: Vec::new(),
            finetune_epochs: 200,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.hidden, self.demo_hidden[0], self.demo_hidden[1], self.head_hidden, self.batch_size];
        if sizes.contains(&0) {
            return Err(Error::Config("model sizes and batch size must be positive".into()));
        }
        let o = self.optimizer;
        if !(o.rho > 0.0 && o.rho < 1.0 && o.eps > 0.0 && o.lr >= 0.0) {
            return Err(Error::Config("optimizer needs 0 < rho < 1, eps > 0, lr >= 0".into()));
        }
        if self.l1 < 0.0 || self.l2 < 0.0 || !self.embedding_init_scale.is_finite() {
            return Err(Error::Config("penalties must be non-negative".into()));
        }
        Ok(())
    }
}

/// Shapes needed to rebuild a network before loading its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkHeader {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub demo_dim: usize,
    pub hidden: usize,
    pub demo_hidden: [usize; 2],
    pub head_hidden: usize,
    pub literal_attention: bool,
    pub target_mean: f64,
    pub target_std: f64,
    /// Prediction offset (years) the network was trained for.
    pub offset: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub architecture: Architecture,
    pub literal_attention: bool,
    /// (|V|+1) × N projection without bias; `None` for the plain variant.
    pub emb: Option<Param>,
    pub lstm1: LstmLayer,
    pub lstm2: LstmLayer,
    pub demo1: Dense,
    pub demo2: Dense,
    pub head1: Dense,
    pub head2: Dense,
    /// Targets are standardized with these before the loss.
    pub target_mean: f64,
    pub target_std: f64,
    pub offset: Option<u32>,
}

/// Everything computed by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub inputs: Vec<Vec<f64>>,
    pub lstm1: LstmTrace,
    pub lstm2: LstmTrace,
    /// Per-dimension attention, T × N (zero rows on masked steps).
    pub attention_dims: Vec<Vec<f64>>,
    /// Scalar attention a_t.
    pub attention: Vec<f64>,
    pub context: Vec<f64>,
    pub demo_pre: [Vec<f64>; 2],
    pub demo_out: Vec<f64>,
    pub head_in: Vec<f64>,
    pub head_pre: Vec<f64>,
    pub head_hidden: Vec<f64>,
    /// Standardized output.
    pub output: f64,
    pub bmi: f64,
}

impl ForwardTrace {
    /// Second-layer hidden states h_1..h_T.
    pub fn hidden_states(&self) -> &[Vec<f64>] {
        &self.lstm2.h
    }
}

impl Network {
    pub fn new(architecture: Architecture, input_dim: usize, demo_dim: usize, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::shape("input width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.hidden;
        let (emb, lstm_in) = match architecture {
            Architecture::Interpretable => {
                let mut w = Tensor2::glorot(input_dim, n, input_dim, n, &mut rng);
                w.scale(config.embedding_init_scale);
                (Some(Param::new(w)), n)
            }
            Architecture::Plain => (None, input_dim),
        };
        let [d1, d2] = config.demo_hidden;
        Ok(Self {
            architecture,
            literal_attention: config.literal_attention,
            emb,
            lstm1: LstmLayer::new(lstm_in, n, &mut rng),
            lstm2: LstmLayer::new(n, n, &mut rng),
            demo1: Dense::new(demo_dim, d1, &mut rng),
            demo2: Dense::new(d1, d2, &mut rng),
            head1: Dense::new(n + d2, config.head_hidden, &mut rng),
            head2: Dense::new(config.head_hidden, 1, &mut rng),
            target_mean: 0.0,
            target_std: 1.0,
            offset: None,
        })
    }

    pub fn header(&self) -> NetworkHeader {
        NetworkHeader {
            architecture: self.architecture,
            input_dim: self.input_dim(),
            demo_dim: self.demo1.input_dim(),
            hidden: self.hidden(),
            demo_hidden: [self.demo1.output_dim(), self.demo2.output_dim()],
            head_hidden: self.head1.output_dim(),
            literal_attention: self.literal_attention,
            target_mean: self.target_mean,
            target_std: self.target_std,
            offset: self.offset,
        }
    }

    /// Zero-initialized network with the header's shapes.
    pub fn from_header(h: &NetworkHeader) -> Result<Self> {
        let config = ModelConfig {
            hidden: h.hidden,
            demo_hidden: h.demo_hidden,
            head_hidden: h.head_hidden,
            literal_attention: h.literal_attention,
            ..ModelConfig::default()
        };
        let mut net = Network::new(h.architecture, h.input_dim, h.demo_dim, &config)?;
        net.target_mean = h.target_mean;
        net.target_std = h.target_std;
        net.offset = h.offset;
        Ok(net)
    }

    pub fn hidden(&self) -> usize {
        self.lstm2.hidden()
    }

    pub fn input_dim(&self) -> usize {
        match &self.emb {
            Some(e) => e.value.rows(),
            None => self.lstm1.input_dim(),
        }
    }

    pub fn demo_dim(&self) -> usize {
        self.demo1.input_dim()
    }

    /// Sets the target standardization from training targets.
    pub fn fit_target_scaler(&mut self, targets: &[f64]) {
        if targets.is_empty() {
            return;
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        self.target_mean = mean;
        self.target_std = if var > 0.0 { var.sqrt() } else { 1.0 };
    }

    fn check(&self, s: &SequenceSample) -> Result<()> {
        let width = self.input_dim();
        if s.x.len() != s.mask.len() || s.x.iter().any(|r| r.len() != width) {
            return Err(Error::shape(format!(
                "sample {} rows do not match input width {width}",
                s.patient_id
            )));
        }
        if s.demo.len() != self.demo_dim() {
            return Err(Error::shape(format!(
                "sample {} demographics width {} vs {}",
                s.patient_id,
                s.demo.len(),
                self.demo_dim()
            )));
        }
        if !s.mask.iter().any(|m| *m) {
            return Err(Error::invalid(format!("sample {} has no unmasked step", s.patient_id)));
        }
        Ok(())
    }

    /// Attention given second-layer hidden states.
    fn attend(&self, h: &[Vec<f64>], mask: &[bool]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let t_len = h.len();
        let n = self.hidden();
        let mut dims = vec![vec![0.0; n]; t_len];
        let mut a = vec![0.0; t_len];
        let live: Vec<usize> = (0..t_len).filter(|&t| mask[t]).collect();
        match (self.architecture, self.literal_attention) {
            (Architecture::Plain, _) => {
                let last = *live.last().unwrap();
                dims[last].iter_mut().for_each(|v| *v = 1.0);
                a[last] = 1.0;
            }
            (Architecture::Interpretable, false) => {
                for i in 0..n {
                    let col: Vec<f64> = live.iter().map(|&t| h[t][i]).collect();
                    for (&t, s) in live.iter().zip(softmax(&col)) {
                        dims[t][i] = s;
                    }
                }
                for &t in &live {
                    a[t] = dims[t].iter().sum::<f64>() / n as f64;
                }
            }
            (Architecture::Interpretable, true) => {
                for &t in &live {
                    dims[t] = softmax(&h[t]);
                    a[t] = dims[t].iter().sum::<f64>() / n as f64;
                }
            }
        }
        (dims, a)
    }

    pub fn forward(&self, s: &SequenceSample) -> Result<ForwardTrace> {
        self.check(s)?;
        let inputs: Vec<Vec<f64>> = match &self.emb {
            Some(emb) => s
                .x
                .iter()
                .zip(&s.mask)
                .map(|(x, &on)| {
                    let mut e = vec![0.0; self.hidden()];
                    if on {
                        emb.value.matvec_t_acc(x, &mut e);
                    }
                    e
                })
                .collect(),
            None => s.x.clone(),
        };
        let lstm1 = self.lstm1.forward_masked(&inputs, &s.mask);
        let lstm2 = self.lstm2.forward_masked(&lstm1.h, &s.mask);
        let (attention_dims, attention) = self.attend(&lstm2.h, &s.mask);
        let mut context = vec![0.0; self.hidden()];
        for (h, a) in lstm2.h.iter().zip(&attention) {
            if *a != 0.0 {
                for (c, v) in context.iter_mut().zip(h) {
                    *c += a * v;
                }
            }
        }
        let pre1 = self.demo1.forward(&s.demo)?;
        let pre2 = self.demo2.forward(&relu(&pre1))?;
        let demo_out = relu(&pre2);
        let mut head_in = context.clone();
        head_in.extend_from_slice(&demo_out);
        let head_pre = self.head1.forward(&head_in)?;
        let head_hidden = relu(&head_pre);
        let output = self.head2.forward(&head_hidden)?[0];
        Ok(ForwardTrace {
            inputs,
            lstm1,
            lstm2,
            attention_dims,
            attention,
            context,
            demo_pre: [pre1, pre2],
            demo_out,
            head_in,
            head_pre,
            head_hidden,
            bmi: output * self.target_std + self.target_mean,
            output,
        })
    }

    pub fn predict_bmi(&self, s: &SequenceSample) -> Result<f64> {
        Ok(self.forward(s)?.bmi)
    }

    /// Accumulates gradients of a loss whose derivative with respect to the
    /// standardized output is `dy`.
    pub fn backward(&mut self, s: &SequenceSample, tr: &ForwardTrace, dy: f64) -> Result<()> {
        let n = self.hidden();
        let d_hidden = self.head2.backward(&tr.head_hidden, &[dy])?;
        let d_pre = relu_backward(&tr.head_pre, &d_hidden);
        let d_in = self.head1.backward(&tr.head_in, &d_pre)?;
        let (dc, dd) = d_in.split_at(n);

        let d2 = relu_backward(&tr.demo_pre[1], dd);
        let d1 = self.demo2.backward(&relu(&tr.demo_pre[0]), &d2)?;
        let d1 = relu_backward(&tr.demo_pre[0], &d1);
        self.demo1.backward(&s.demo, &d1)?;

        let t_len = s.mask.len();
        let h = &tr.lstm2.h;
        let mut dh = vec![vec![0.0; n]; t_len];
        let mut da = vec![0.0; t_len];
        for t in 0..t_len {
            if tr.attention[t] != 0.0 {
                for i in 0..n {
                    dh[t][i] += tr.attention[t] * dc[i];
                }
            }
            if s.mask[t] {
                da[t] = dc.iter().zip(&h[t]).map(|(a, b)| a * b).sum();
            }
        }
        let live: Vec<usize> = (0..t_len).filter(|&t| s.mask[t]).collect();
        match (self.architecture, self.literal_attention) {
            (Architecture::Plain, _) => {}
            (Architecture::Interpretable, false) => {
                for i in 0..n {
                    let col: Vec<f64> = live.iter().map(|&t| tr.attention_dims[t][i]).collect();
                    let dcol: Vec<f64> = live.iter().map(|&t| da[t] / n as f64).collect();
                    for (&t, g) in live.iter().zip(softmax_backward(&col, &dcol)) {
                        dh[t][i] += g;
                    }
                }
            }
            (Architecture::Interpretable, true) => {
                for &t in &live {
                    let drow = vec![da[t] / n as f64; n];
                    for (i, g) in softmax_backward(&tr.attention_dims[t], &drow).into_iter().enumerate() {
                        dh[t][i] += g;
                    }
                }
            }
        }

        let dx2 = self.lstm2.backward_masked(&tr.lstm1.h, &tr.lstm2, &dh);
        let dx1 = self.lstm1.backward_masked(&tr.inputs, &tr.lstm1, &dx2);
        if let Some(emb) = &mut self.emb {
            for ((x, de), &on) in s.x.iter().zip(&dx1).zip(&s.mask) {
                if on {
                    emb.grad.outer_acc(x, de);
                }
            }
        }
        Ok(())
    }

    /// Penalty on the first LSTM layer's input and recurrent weights; adds
    /// its gradient.
    pub fn penalty_and_grad(&mut self, l1: f64, l2: f64) -> f64 {
        l1_l2_penalty(&mut self.lstm1.w, l1, l2) + l1_l2_penalty(&mut self.lstm1.u, l1, l2)
    }

    pub fn penalty(&self, l1: f64, l2: f64) -> f64 {
        [&self.lstm1.w, &self.lstm1.u]
            .iter()
            .flat_map(|p| p.value.data())
            .map(|w| l1 * w.abs() + l2 * w * w)
            .sum()
    }

    fn standardized(&self, bmi: f64) -> f64 {
        (bmi - self.target_mean) / self.target_std
    }

    /// Mean squared error on standardized targets plus the penalty, with
    /// gradients accumulated into the parameters.
    pub fn batch_loss_and_grad(&mut self, batch: &[&SequenceSample], l1: f64, l2: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut mse = 0.0;
        for s in batch {
            let tr = self.forward(s)?;
            let err = tr.output - self.standardized(s.target_bmi);
            mse += err * err * scale;
            self.backward(s, &tr, 2.0 * err * scale)?;
        }
        Ok(mse + self.penalty_and_grad(l1, l2))
    }

    pub fn batch_loss(&self, batch: &[&SequenceSample], l1: f64, l2: f64) -> Result<f64> {
        let scale = 1.0 / batch.len() as f64;
        let mut mse = 0.0;
        for s in batch {
            let err = self.forward(s)?.output - self.standardized(s.target_bmi);
            mse += err * err * scale;
        }
        Ok(mse + self.penalty(l1, l2))
    }

    /// Adadelta update of every parameter not matched by a `frozen` prefix.
    pub fn step(&mut self, opt: &Adadelta, frozen: &[String]) {
        self.visit_params_mut(&mut |name, p| {
            if frozen.iter().any(|f| name.starts_with(f.as_str())) {
                p.zero_grad();
            } else {
                p.adadelta_step(opt);
            }
        });
    }
}

impl Parameterized for Network {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(e) = &self.emb {
            f("emb", e);
        }
        self.lstm1.visit("lstm1", f);
        self.lstm2.visit("lstm2", f);
        self.demo1.visit("demo1", f);
        self.demo2.visit("demo2", f);
        self.head1.visit("head1", f);
        self.head2.visit("head2", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(e) = &mut self.emb {
            f("emb", e);
        }
        self.lstm1.visit_mut("lstm1", f);
        self.lstm2.visit_mut("lstm2", f);
        self.demo1.visit_mut("demo1", f);
        self.demo2.visit_mut("demo2", f);
        self.head1.visit_mut("head1", f);
        self.head2.visit_mut("head2", f);
    }
}
