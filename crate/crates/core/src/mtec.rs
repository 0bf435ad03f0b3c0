//! The latent-variable multi-task model: a shared feature encoder, a
//! recognition network producing a factorized Gaussian posterior over the
//! latent factors, and a linear multi-species decoder behind a link function.
//!
//! For a site with preprocessed covariates `e` and community row `y`:
//!
//! ```text
//! x       = f_ext(e)                       (K-vector)
//! mu, lv  = f_rec(y)                       (L-vectors, var = exp(lv))
//! h       = mu + eps * sqrt(var)           (eps ~ N(0, I))
//! eta_j   = c_j + x . B[:, j] + h . A[:, j]
//! theta_j = g^-1(eta_j)
//! ```
//!
//! The training objective is the negative ELBO: weighted binary
//! cross-entropy, plus the closed-form Gaussian KL to the prior, plus an
//! elastic-net penalty over every weight except the species intercepts.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, DenseStack, Parameterized, Tape, TensorMut, TensorView};
use crate::numeric::Link;

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtecConfig {
    /// Number of latent factors `L`.
    pub latent_dim: usize,
    /// Width `K` of the shared environmental embedding.
    pub embed_dim: usize,
    /// Hidden widths of the feature encoder before the embedding layer.
    pub encoder_widths: Vec<usize>,
    /// Hidden widths of the recognition network before its `2L` output.
    pub recog_widths: Vec<usize>,
    pub link: Link,
    pub hidden_activation: Activation,
    /// Activation of the embedding layer itself.
    pub embed_activation: Activation,
    /// Prior mean per factor; standard normal when absent.
    pub prior_mean: Option<Vec<f64>>,
    pub prior_var: Option<Vec<f64>>,
    pub lambda_lasso: f64,
    pub lambda_ridge: f64,
}

impl Default for MtecConfig {
    fn default() -> Self {
        MtecConfig {
            latent_dim: 3,
            embed_dim: 16,
            encoder_widths: Vec::new(),
            recog_widths: Vec::new(),
            link: Link::Probit,
            hidden_activation: Activation::Relu,
            embed_activation: Activation::Relu,
            prior_mean: None,
            prior_var: None,
            lambda_lasso: 1e-4,
            lambda_ridge: 1e-4,
        }
    }
}

impl MtecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if self.embed_dim == 0 || self.encoder_widths.contains(&0) || self.recog_widths.contains(&0)
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if let Some(m) = &self.prior_mean {
            if m.len() != self.latent_dim {
                return Err(Error::Config(format!(
                    "prior_mean has {} entries, latent_dim is {}",
                    m.len(),
                    self.latent_dim
                )));
            }
        }
        if let Some(v) = &self.prior_var {
            if v.len() != self.latent_dim {
                return Err(Error::Config(format!(
                    "prior_var has {} entries, latent_dim is {}",
                    v.len(),
                    self.latent_dim
                )));
            }
            if v.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::Config("prior_var must be strictly positive".into()));
            }
        }
        if !(self.lambda_lasso >= 0.0 && self.lambda_ridge >= 0.0) {
            return Err(Error::Config(
                "regularization weights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn prior_mean(&self) -> Vec<f64> {
        self.prior_mean
            .clone()
            .unwrap_or_else(|| vec![0.0; self.latent_dim])
    }

    pub fn prior_var(&self) -> Vec<f64> {
        self.prior_var
            .clone()
            .unwrap_or_else(|| vec![1.0; self.latent_dim])
    }
}

/// All trainable parameters plus the fixed configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MtecModel {
    pub config: MtecConfig,
    pub feature_encoder: DenseStack,
    pub recog_net: DenseStack,
    /// `K x M` species responses to the embedding.
    pub response: DMatrix<f64>,
    /// `L x M` latent factor loadings.
    pub loadings: DMatrix<f64>,
    pub intercepts: DVector<f64>,
    pub trained: bool,
}

/// Factorized Gaussian posterior, one row per site.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    pub mu: DMatrix<f64>,
    pub var: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub recon: f64,
    pub kl: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictMode {
    /// Latent factors fixed at the prior mean.
    PriorMean,
    /// Average over prior draws of the latent factors.
    PriorSample { seed: u64, n_draws: usize },
}

fn stack_widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl MtecModel {
    /// Glorot-initialized model (intercepts zero).
    pub fn glorot<R: Rng>(
        config: MtecConfig,
        input_width: usize,
        n_species: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let fe = DenseStack::glorot(
            &stack_widths(input_width, &config.encoder_widths, config.embed_dim),
            config.hidden_activation,
            config.embed_activation,
            rng,
        );
        let rn = DenseStack::glorot(
            &stack_widths(n_species, &config.recog_widths, 2 * config.latent_dim),
            config.hidden_activation,
            Activation::Linear,
            rng,
        );
        let response = crate::nn::glorot_uniform(config.embed_dim, n_species, rng);
        let loadings = crate::nn::glorot_uniform(config.latent_dim, n_species, rng);
        Ok(MtecModel {
            feature_encoder: fe,
            recog_net: rn,
            response,
            loadings,
            intercepts: DVector::zeros(n_species),
            config,
            trained: false,
        })
    }

    /// Same architecture as [`MtecModel::glorot`] with every parameter zero.
    pub fn zeroed(config: MtecConfig, input_width: usize, n_species: usize) -> Result<Self> {
        let mut m = Self::glorot(
            config,
            input_width,
            n_species,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        for t in m.tensors_mut() {
            t.data.fill(0.0);
        }
        Ok(m)
    }

    pub fn n_species(&self) -> usize {
        self.intercepts.len()
    }

    pub fn input_width(&self) -> usize {
        self.feature_encoder.input_width()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Shared embedding `x = f_ext(e)` for every row of `e`.
    pub fn encode_features(&self, e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.feature_encoder.predict(e)
    }

    /// Posterior means and variances for every community row.
    pub fn encode_posterior(&self, y: &DMatrix<f64>) -> Result<VariationalPosterior> {
        let out = self.recog_net.predict(y)?;
        Ok(self.split_posterior(&out))
    }

    fn split_posterior(&self, out: &DMatrix<f64>) -> VariationalPosterior {
        let l = self.latent_dim();
        VariationalPosterior {
            mu: out.columns(0, l).into_owned(),
            var: out.columns(l, l).map(f64::exp),
        }
    }

    /// Linear predictors `eta` for embedding rows `x` and latent rows `h`.
    pub fn linear_predictor(&self, x: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.response.nrows() {
            return Err(Error::shape(
                "embedding width",
                self.response.nrows(),
                x.ncols(),
            ));
        }
        if h.ncols() != self.loadings.nrows() {
            return Err(Error::shape(
                "latent width",
                self.loadings.nrows(),
                h.ncols(),
            ));
        }
        if x.nrows() != h.nrows() {
            return Err(Error::shape("latent rows", x.nrows(), h.nrows()));
        }
        let mut eta = x * &self.response + h * &self.loadings;
        for mut row in eta.row_iter_mut() {
            row += self.intercepts.transpose();
        }
        Ok(eta)
    }

    /// Occurrence probabilities for embedding rows `x` and latent rows `h`.
    pub fn decode(&self, x: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let link = self.config.link;
        Ok(self.linear_predictor(x, h)?.map(|v| link.inverse(v)))
    }

    /// Elastic-net penalty over every weight and bias except the intercepts.
    pub fn regularization(&self) -> f64 {
        let (l1, l2) = (self.config.lambda_lasso, self.config.lambda_ridge);
        if l1 == 0.0 && l2 == 0.0 {
            return 0.0;
        }
        self.penalized_tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|w| l1 * w.abs() + l2 * w * w)
            .sum()
    }

    fn penalized_tensors(&self) -> Vec<TensorView<'_>> {
        let mut t = self.tensors();
        t.pop(); // intercepts
        t
    }

    fn check_batch(
        &self,
        e: &DMatrix<f64>,
        y: &DMatrix<f64>,
        eps: &DMatrix<f64>,
        weights: &[f64],
    ) -> Result<()> {
        let n = e.nrows();
        if y.nrows() != n {
            return Err(Error::shape("community rows", n, y.nrows()));
        }
        if eps.nrows() != n || eps.ncols() != self.latent_dim() {
            return Err(Error::shape(
                "epsilon draws",
                n * self.latent_dim(),
                eps.nrows() * eps.ncols(),
            ));
        }
        if y.ncols() != self.n_species() {
            return Err(Error::shape("community width", self.n_species(), y.ncols()));
        }
        if weights.len() != self.n_species() {
            return Err(Error::shape(
                "class weights",
                self.n_species(),
                weights.len(),
            ));
        }
        Ok(())
    }

    /// Negative ELBO on a batch with one `eps` row per site.
    pub fn elbo_loss(
        &self,
        e: &DMatrix<f64>,
        y: &DMatrix<f64>,
        eps: &DMatrix<f64>,
        class_weights: &[f64],
    ) -> Result<LossParts> {
        self.check_batch(e, y, eps, class_weights)?;
        let x = self.encode_features(e)?;
        let post = self.encode_posterior(y)?;
        let h = sample_latent(&post.mu, &post.var, eps);
        let theta = self.decode(&x, &h)?;
        let recon = reconstruction_loss(&theta, y, class_weights);
        let kl = self.kl_term(&post);
        let reg = self.regularization();
        let parts = LossParts {
            recon,
            kl,
            reg,
            total: recon + kl + reg,
        };
        if !parts.total.is_finite() {
            return Err(Error::NonFinite("total loss".into()));
        }
        Ok(parts)
    }

    fn kl_term(&self, post: &VariationalPosterior) -> f64 {
        let (pm, pv) = (self.config.prior_mean(), self.config.prior_var());
        (0..post.mu.nrows())
            .map(|i| {
                let mu: Vec<f64> = post.mu.row(i).iter().copied().collect();
                let var: Vec<f64> = post.var.row(i).iter().copied().collect();
                gaussian_kl(&mu, &var, &pm, &pv)
            })
            .sum()
    }

    /// Loss together with its gradient for every tensor, in
    /// [`Parameterized::tensors`] order.
    pub fn elbo_loss_and_grad(
        &self,
        e: &DMatrix<f64>,
        y: &DMatrix<f64>,
        eps: &DMatrix<f64>,
        class_weights: &[f64],
    ) -> Result<(LossParts, Vec<Vec<f64>>)> {
        self.check_batch(e, y, eps, class_weights)?;
        let l = self.latent_dim();
        let (pm, pv) = (self.config.prior_mean(), self.config.prior_var());
        let link = self.config.link;

        let mut fe_tape = Tape::new();
        let x = self.feature_encoder.forward(e, &mut fe_tape)?;
        let mut rn_tape = Tape::new();
        let rec = self.recog_net.forward(y, &mut rn_tape)?;
        let post = self.split_posterior(&rec);
        let sd = post.var.map(f64::sqrt);
        let h = &post.mu + eps.component_mul(&sd);
        let eta = self.linear_predictor(&x, &h)?;

        let mut recon = 0.0;
        let mut d_eta = DMatrix::zeros(eta.nrows(), eta.ncols());
        for i in 0..eta.nrows() {
            for j in 0..eta.ncols() {
                let raw = link.inverse(eta[(i, j)]);
                let theta = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                let (yy, w) = (y[(i, j)], class_weights[j]);
                recon -= w * yy * theta.ln() + (1.0 - yy) * (1.0 - theta).ln();
                if raw == theta {
                    let d_theta = -w * yy / theta + (1.0 - yy) / (1.0 - theta);
                    d_eta[(i, j)] = d_theta * link.inverse_derivative(eta[(i, j)]);
                }
            }
        }
        let kl = self.kl_term(&post);
        let reg = self.regularization();
        let parts = LossParts {
            recon,
            kl,
            reg,
            total: recon + kl + reg,
        };
        if !parts.total.is_finite() {
            return Err(Error::NonFinite("total loss".into()));
        }

        let d_response = x.transpose() * &d_eta;
        let d_loadings = h.transpose() * &d_eta;
        let d_intercepts = d_eta.row_sum().transpose();
        let d_x = &d_eta * self.response.transpose();
        let d_h = &d_eta * self.loadings.transpose();

        let mut d_rec = DMatrix::zeros(rec.nrows(), 2 * l);
        for i in 0..rec.nrows() {
            for k in 0..l {
                let (mu, var) = (post.mu[(i, k)], post.var[(i, k)]);
                d_rec[(i, k)] = d_h[(i, k)] + (mu - pm[k]) / pv[k];
                d_rec[(i, l + k)] =
                    d_h[(i, k)] * eps[(i, k)] * 0.5 * sd[(i, k)] + 0.5 * (var / pv[k] - 1.0);
            }
        }
        let (fe_grad, _) = self.feature_encoder.backward(&fe_tape, &d_x)?;
        let (rn_grad, _) = self.recog_net.backward(&rn_tape, &d_rec)?;

        let mut grads = fe_grad.flatten();
        grads.extend(rn_grad.flatten());
        grads.push(d_response.as_slice().to_vec());
        grads.push(d_loadings.as_slice().to_vec());
        grads.push(d_intercepts.as_slice().to_vec());

        let (l1, l2) = (self.config.lambda_lasso, self.config.lambda_ridge);
        if l1 != 0.0 || l2 != 0.0 {
            for (g, t) in grads.iter_mut().zip(self.penalized_tensors()) {
                for (gi, w) in g.iter_mut().zip(t.data) {
                    let sign = if *w > 0.0 {
                        1.0
                    } else if *w < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *gi += l1 * sign + 2.0 * l2 * w;
                }
            }
        }
        Ok((parts, grads))
    }

    /// Occurrence probabilities on new sites from preprocessed covariates.
    pub fn predict(&self, e: &DMatrix<f64>, mode: PredictMode) -> Result<DMatrix<f64>> {
        if !self.trained {
            return Err(Error::Contract(
                "predict called on an untrained model".into(),
            ));
        }
        self.predict_unchecked(e, mode)
    }

    pub(crate) fn predict_unchecked(
        &self,
        e: &DMatrix<f64>,
        mode: PredictMode,
    ) -> Result<DMatrix<f64>> {
        let x = self.encode_features(e)?;
        let n = e.nrows();
        let l = self.latent_dim();
        let pm = self.config.prior_mean();
        match mode {
            PredictMode::PriorMean => {
                let h = DMatrix::from_fn(n, l, |_, k| pm[k]);
                self.decode(&x, &h)
            }
            PredictMode::PriorSample { seed, n_draws } => {
                if n_draws == 0 {
                    return Err(Error::Config(
                        "prior sampling needs at least one draw".into(),
                    ));
                }
                let pv = self.config.prior_var();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut acc = DMatrix::zeros(n, self.n_species());
                for _ in 0..n_draws {
                    let h = DMatrix::from_fn(n, l, |_, k| {
                        let z: f64 = rng.sample(StandardNormal);
                        pm[k] + z * pv[k].sqrt()
                    });
                    acc += self.decode(&x, &h)?;
                }
                Ok(acc / n_draws as f64)
            }
        }
    }

    /// Replaces the feature encoder with a single identity layer (requires
    /// `embed_dim == input width`). Handy for tests and worked examples.
    pub fn with_identity_encoder(mut self) -> Result<Self> {
        let k = self.config.embed_dim;
        if self.input_width() != k {
            return Err(Error::shape("identity encoder", k, self.input_width()));
        }
        self.config.encoder_widths.clear();
        self.config.embed_activation = Activation::Linear;
        self.feature_encoder = DenseStack::from_layers(vec![Dense {
            weight: DMatrix::identity(k, k),
            bias: DVector::zeros(k),
            activation: Activation::Linear,
        }])?;
        Ok(self)
    }
}

impl Parameterized for MtecModel {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = self.feature_encoder.named_tensors("feature_encoder");
        out.extend(self.recog_net.named_tensors("recog_net"));
        out.push(TensorView {
            name: "response".into(),
            rows: self.response.nrows(),
            cols: self.response.ncols(),
            data: self.response.as_slice(),
        });
        out.push(TensorView {
            name: "loadings".into(),
            rows: self.loadings.nrows(),
            cols: self.loadings.ncols(),
            data: self.loadings.as_slice(),
        });
        out.push(TensorView {
            name: "intercepts".into(),
            rows: self.intercepts.len(),
            cols: 1,
            data: self.intercepts.as_slice(),
        });
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = self.feature_encoder.named_tensors_mut("feature_encoder");
        out.extend(self.recog_net.named_tensors_mut("recog_net"));
        let (r, c) = self.response.shape();
        out.push(TensorMut {
            name: "response".into(),
            rows: r,
            cols: c,
            data: self.response.as_mut_slice(),
        });
        let (r, c) = self.loadings.shape();
        out.push(TensorMut {
            name: "loadings".into(),
            rows: r,
            cols: c,
            data: self.loadings.as_mut_slice(),
        });
        let r = self.intercepts.len();
        out.push(TensorMut {
            name: "intercepts".into(),
            rows: r,
            cols: 1,
            data: self.intercepts.as_mut_slice(),
        });
        out
    }
}

/// Reparameterized draw `h = mu + eps * sqrt(var)`.
pub fn sample_latent(mu: &DMatrix<f64>, var: &DMatrix<f64>, eps: &DMatrix<f64>) -> DMatrix<f64> {
    mu + eps.component_mul(&var.map(|v| v.max(0.0).sqrt()))
}

/// `KL(N(mu_q, var_q) || N(mu_p, var_p))` summed over independent coordinates.
pub fn gaussian_kl(mu_q: &[f64], var_q: &[f64], mu_p: &[f64], var_p: &[f64]) -> f64 {
    mu_q.iter()
        .zip(var_q)
        .zip(mu_p.iter().zip(var_p))
        .map(|((mq, vq), (mp, vp))| 0.5 * (vq / vp + (mp - mq).powi(2) / vp - 1.0 + (vp / vq).ln()))
        .sum()
}

/// Weighted binary cross-entropy summed over sites and species, with
/// probabilities clamped away from 0 and 1.
pub fn reconstruction_loss(theta: &DMatrix<f64>, y: &DMatrix<f64>, class_weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..theta.nrows() {
        for j in 0..theta.ncols() {
            total += species_loss(theta[(i, j)], y[(i, j)], class_weights[j]);
        }
    }
    total
}

fn species_loss(theta: f64, y: f64, w: f64) -> f64 {
    let t = theta.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(w * y * t.ln() + (1.0 - y) * (1.0 - t).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference, gradient_errors};

    fn small_config() -> MtecConfig {
        MtecConfig {
            latent_dim: 3,
            embed_dim: 4,
            encoder_widths: vec![5],
            recog_widths: vec![4],
            hidden_activation: Activation::Tanh,
            embed_activation: Activation::Tanh,
            lambda_lasso: 0.01,
            lambda_ridge: 0.02,
            ..Default::default()
        }
    }

    fn toy_batch(
        rng: &mut ChaCha8Rng,
        n: usize,
        p: usize,
        m: usize,
        l: usize,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let e = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.5..1.5));
        let y = DMatrix::from_fn(n, m, |_, _| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        let eps = DMatrix::from_fn(n, l, |_, _| rng.sample(StandardNormal));
        (e, y, eps)
    }

    #[test]
    fn identity_encoder_passes_features_through() {
        let cfg = MtecConfig {
            embed_dim: 3,
            ..Default::default()
        };
        let m = MtecModel::zeroed(cfg, 3, 2)
            .unwrap()
            .with_identity_encoder()
            .unwrap();
        let e = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.0, 3.0, -1.0]);
        assert_eq!(m.encode_features(&e).unwrap(), e);
    }

    #[test]
    fn embedding_width_follows_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MtecModel::glorot(MtecConfig::default(), 9, 5, &mut rng).unwrap();
        assert_eq!(
            m.encode_features(&DMatrix::zeros(2, 9)).unwrap().shape(),
            (2, 16)
        );
        assert!(matches!(
            m.encode_features(&DMatrix::zeros(1, 8)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zeroed_recognition_net_gives_standard_posterior() {
        let m = MtecModel::zeroed(MtecConfig::default(), 2, 4).unwrap();
        let post = m
            .encode_posterior(&DMatrix::from_element(3, 4, 1.0))
            .unwrap();
        assert_eq!(post.mu.shape(), (3, 3));
        assert!(post.mu.iter().all(|v| *v == 0.0));
        assert!(post.var.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn posterior_variance_is_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = MtecConfig {
            recog_widths: vec![6],
            ..Default::default()
        };
        let m = MtecModel::glorot(cfg, 2, 10, &mut rng).unwrap();
        let y = DMatrix::from_fn(
            10_000,
            10,
            |_, _| if rng.random_bool(0.3) { 1.0 } else { 0.0 },
        );
        let post = m.encode_posterior(&y).unwrap();
        assert!(post.var.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn reparameterization_edge_cases() {
        let mu = DMatrix::from_row_slice(1, 2, &[0.5, -1.0]);
        let var = DMatrix::from_row_slice(1, 2, &[2.0, 0.0]);
        assert_eq!(sample_latent(&mu, &var, &DMatrix::zeros(1, 2)), mu);
        let h = sample_latent(&mu, &var, &DMatrix::from_row_slice(1, 2, &[1.0, 7.0]));
        assert_eq!(h[(0, 1)], -1.0);
        assert!((h[(0, 0)] - (0.5 + 2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn reparameterized_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let (mu, var) = (0.7, 2.5);
        let eps = DMatrix::from_fn(n, 1, |_, _| rng.sample(StandardNormal));
        let h = sample_latent(
            &DMatrix::from_element(n, 1, mu),
            &DMatrix::from_element(n, 1, var),
            &eps,
        );
        let mean = h.mean();
        let se = (var / n as f64).sqrt();
        assert!((mean - mu).abs() < 4.0 * se);
    }

    #[test]
    fn decode_at_origin_is_half() {
        let m = MtecModel::zeroed(small_config(), 3, 5).unwrap();
        let theta = m
            .decode(&DMatrix::zeros(2, 4), &DMatrix::zeros(2, 3))
            .unwrap();
        assert!(theta.iter().all(|v| *v == 0.5));
        let mut m = m;
        m.intercepts[0] = 1.0;
        let theta = m
            .decode(&DMatrix::zeros(1, 4), &DMatrix::zeros(1, 3))
            .unwrap();
        assert!((theta[(0, 0)] - 0.841345).abs() < 1e-6);
    }

    #[test]
    fn zero_loadings_ignore_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = MtecModel::glorot(small_config(), 3, 5, &mut rng).unwrap();
        m.loadings.fill(0.0);
        let x = DMatrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
        let a = m.decode(&x, &DMatrix::zeros(2, 3)).unwrap();
        let b = m.decode(&x, &DMatrix::from_element(2, 3, 5.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(
            gaussian_kl(&[0.3, -1.0], &[2.0, 0.5], &[0.3, -1.0], &[2.0, 0.5]),
            0.0
        );
        assert!((gaussian_kl(&[1.0], &[1.0], &[0.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (mq, vq, mp, vp): (f64, f64, f64, f64) = (0.4, 0.6, -0.2, 1.7);
        let n = 100_000;
        let log_n = |x: f64, m: f64, v: f64| {
            -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v)
        };
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                let h = mq + z * vq.sqrt();
                log_n(h, mq, vq) - log_n(h, mp, vp)
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let sd = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let kl = gaussian_kl(&[mq], &[vq], &[mp], &[vp]);
        assert!((kl - mean).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn reconstruction_factorizes_over_species() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta = DMatrix::from_fn(7, 4, |_, _| rng.random_range(0.01..0.99));
        let y = DMatrix::from_fn(7, 4, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let w = [1.0, 3.0, 0.5, 2.0];
        let joint = reconstruction_loss(&theta, &y, &w);
        let separate: f64 = (0..4)
            .map(|j| {
                reconstruction_loss(
                    &theta.columns(j, 1).into_owned(),
                    &y.columns(j, 1).into_owned(),
                    &w[j..=j],
                )
            })
            .sum();
        assert!((joint - separate).abs() < 1e-12);
    }

    #[test]
    fn zero_lambdas_disable_regularization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = MtecConfig {
            lambda_lasso: 0.0,
            lambda_ridge: 0.0,
            ..small_config()
        };
        let m = MtecModel::glorot(cfg, 3, 5, &mut rng).unwrap();
        assert_eq!(m.regularization(), 0.0);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..3 {
            let mut m = MtecModel::glorot(small_config(), 3, 5, &mut rng).unwrap();
            for v in m.intercepts.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            let (e, y, eps) = toy_batch(&mut rng, 6, 3, 5, 3);
            let w = [1.0, 2.0, 0.7, 1.3, 4.0];
            let (_, analytic) = m.elbo_loss_and_grad(&e, &y, &eps, &w).unwrap();
            let numeric =
                finite_difference(&m, 1e-5, |mm| mm.elbo_loss(&e, &y, &eps, &w).unwrap().total);
            for (name, err) in gradient_errors(&m, &analytic, &numeric) {
                assert!(err < 1e-4, "{name}: {err}");
            }
        }
    }

    #[test]
    fn loss_and_grad_agree_on_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = MtecModel::glorot(small_config(), 3, 5, &mut rng).unwrap();
        let (e, y, eps) = toy_batch(&mut rng, 4, 3, 5, 3);
        let w = [1.0; 5];
        let a = m.elbo_loss(&e, &y, &eps, &w).unwrap();
        let (b, _) = m.elbo_loss_and_grad(&e, &y, &eps, &w).unwrap();
        assert!((a.total - b.total).abs() < 1e-10);
        assert!(a.kl >= 0.0);
    }

    #[test]
    fn predict_requires_training_flag() {
        let m = MtecModel::zeroed(small_config(), 3, 2).unwrap();
        assert!(matches!(
            m.predict(&DMatrix::zeros(1, 3), PredictMode::PriorMean),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn prior_mean_prediction_is_decode_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut m = MtecModel::glorot(small_config(), 3, 4, &mut rng).unwrap();
        m.trained = true;
        let e = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let p = m.predict(&e, PredictMode::PriorMean).unwrap();
        let x = m.encode_features(&e).unwrap();
        assert_eq!(p, m.decode(&x, &DMatrix::zeros(5, 3)).unwrap());
    }

    #[test]
    fn prior_sampling_matches_monte_carlo_oracle() {
        // two species, one latent factor, identity-free toy with known eta.
        let cfg = MtecConfig {
            latent_dim: 1,
            embed_dim: 1,
            embed_activation: Activation::Linear,
            ..Default::default()
        };
        let mut m = MtecModel::zeroed(cfg, 1, 2)
            .unwrap()
            .with_identity_encoder()
            .unwrap();
        m.response = DMatrix::from_row_slice(1, 2, &[0.8, -0.3]);
        m.loadings = DMatrix::from_row_slice(1, 2, &[1.2, 0.5]);
        m.intercepts = DVector::from_vec(vec![-0.4, 0.2]);
        m.trained = true;
        let e = DMatrix::from_row_slice(1, 1, &[0.5]);
        let got = m
            .predict(
                &e,
                PredictMode::PriorSample {
                    seed: 5,
                    n_draws: 20_000,
                },
            )
            .unwrap();
        // oracle: independent draws, direct formula
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let n = 100_000;
        for j in 0..2 {
            let draws: Vec<f64> = (0..n)
                .map(|_| {
                    let h: f64 = rng.sample(StandardNormal);
                    let eta = m.intercepts[j] + 0.5 * m.response[(0, j)] + h * m.loadings[(0, j)];
                    crate::numeric::normal_cdf(eta)
                })
                .collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            // combined SE of both estimates
            let se = sd * (1.0 / n as f64 + 1.0 / 20_000.0).sqrt();
            assert!((got[(0, j)] - mean).abs() < 3.0 * se, "species {j}");
        }
    }
}
