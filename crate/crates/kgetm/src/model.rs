//! The probabilistic core: topic matrices from code and topic embeddings,
//! the variational encoder, reparameterized sampling, per-document
//! likelihood, KL regularizer, and the minibatch ELBO.
//!
//! Every quantity exists twice: a plain ndarray implementation that defines
//! the contract, and a tape builder the trainer differentiates through.
//! Tests pin the two against each other.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::corpus::{normalize_bow, Modality, PatientDocument};
use crate::error::{Error, Result};
use crate::util;

pub const LIK_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub v_icd: usize,
    pub v_atc: usize,
    pub k: usize,
    pub l: usize,
    pub hidden: usize,
    /// Shared hidden layers between the input layers and the output heads.
    pub trunk_depth: usize,
    /// Use one topic-embedding matrix for both modalities.
    pub shared_alpha: bool,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.v_icd == 0 || self.v_atc == 0 || self.k == 0 || self.l == 0 || self.hidden == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicEmbeddings {
    /// L x K.
    pub alpha_icd: Array2<f64>,
    pub alpha_atc: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicMatrices {
    /// V_icd x K, each column a distribution over codes.
    pub beta_icd: Array2<f64>,
    pub beta_atc: Array2<f64>,
}

impl TopicMatrices {
    pub fn beta(&self, modality: Modality) -> &Array2<f64> {
        match modality {
            Modality::Icd => &self.beta_icd,
            Modality::Atc => &self.beta_atc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, beta) in [("beta_icd", &self.beta_icd), ("beta_atc", &self.beta_atc)] {
            for (k, col) in beta.columns().into_iter().enumerate() {
                let s = col.sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::Invalid(format!(
                        "{name} column {k} sums to {s}, expected 1"
                    )));
                }
                if col.iter().any(|&x| x <= 0.0) {
                    return Err(Error::Invalid(format!(
                        "{name} column {k} has a non-positive entry"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParameters {
    /// hidden x V_icd.
    pub w_icd: Array2<f64>,
    /// hidden x 1.
    pub b_icd: Array2<f64>,
    pub w_atc: Array2<f64>,
    pub b_atc: Array2<f64>,
    /// Shared hidden-to-hidden layers, each (hidden x hidden, hidden x 1).
    pub trunk: Vec<(Array2<f64>, Array2<f64>)>,
    /// K x hidden.
    pub w_mu: Array2<f64>,
    pub b_mu: Array2<f64>,
    pub w_sigma: Array2<f64>,
    pub b_sigma: Array2<f64>,
}

impl EncoderParameters {
    pub fn params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("enc.w_icd".to_string(), &self.w_icd),
            ("enc.b_icd".to_string(), &self.b_icd),
            ("enc.w_atc".to_string(), &self.w_atc),
            ("enc.b_atc".to_string(), &self.b_atc),
        ];
        for (i, (w, b)) in self.trunk.iter().enumerate() {
            out.push((format!("enc.trunk{i}.w"), w));
            out.push((format!("enc.trunk{i}.b"), b));
        }
        out.push(("enc.w_mu".to_string(), &self.w_mu));
        out.push(("enc.b_mu".to_string(), &self.b_mu));
        out.push(("enc.w_sigma".to_string(), &self.w_sigma));
        out.push(("enc.b_sigma".to_string(), &self.b_sigma));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![
            ("enc.w_icd".to_string(), &mut self.w_icd),
            ("enc.b_icd".to_string(), &mut self.b_icd),
            ("enc.w_atc".to_string(), &mut self.w_atc),
            ("enc.b_atc".to_string(), &mut self.b_atc),
        ];
        for (i, (w, b)) in self.trunk.iter_mut().enumerate() {
            out.push((format!("enc.trunk{i}.w"), w));
            out.push((format!("enc.trunk{i}.b"), b));
        }
        out.push(("enc.w_mu".to_string(), &mut self.w_mu));
        out.push(("enc.b_mu".to_string(), &mut self.b_mu));
        out.push(("enc.w_sigma".to_string(), &mut self.w_sigma));
        out.push(("enc.b_sigma".to_string(), &mut self.b_sigma));
        out
    }
}

/// Per-document variational quantities.
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub mu: Array1<f64>,
    pub log_sigma: Array1<f64>,
    pub delta_hat: Array1<f64>,
    pub theta: Array1<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum NoiseMode {
    Seeded(u64),
    Zero,
}

/// Standard-normal (or zero) noise, K x B, derived from the mode and a
/// stream tag so distinct call sites never share draws.
pub fn draw_noise(k: usize, b: usize, mode: NoiseMode, tag: &str) -> Array2<f64> {
    match mode {
        NoiseMode::Zero => Array2::zeros((k, b)),
        NoiseMode::Seeded(seed) => {
            let mut rng = util::derived_rng(seed, tag);
            Array2::from_shape_fn((k, b), |_| StandardNormal.sample(&mut rng))
        }
    }
}

pub fn init_topic_embeddings(dims: &ModelDims, seed: u64) -> TopicEmbeddings {
    let bound = (6.0 / (dims.l + dims.k) as f64).sqrt();
    let draw = |tag: &str| {
        let mut rng = util::derived_rng(seed, tag);
        Array2::from_shape_fn((dims.l, dims.k), |_| rng.random_range(-bound..bound))
    };
    TopicEmbeddings {
        alpha_icd: draw("alpha-init:icd"),
        alpha_atc: draw("alpha-init:atc"),
    }
}

pub fn init_encoder(dims: &ModelDims, seed: u64) -> EncoderParameters {
    let he = |rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize| {
        let sd = (2.0 / cols as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, sd).expect("positive sd");
        Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
    };
    let mut rng = util::derived_rng(seed, "encoder-init");
    let w_icd = he(&mut rng, dims.hidden, dims.v_icd);
    let w_atc = he(&mut rng, dims.hidden, dims.v_atc);
    let trunk = (0..dims.trunk_depth)
        .map(|_| {
            (
                he(&mut rng, dims.hidden, dims.hidden),
                Array2::zeros((dims.hidden, 1)),
            )
        })
        .collect();
    let w_mu = he(&mut rng, dims.k, dims.hidden);
    let w_sigma = he(&mut rng, dims.k, dims.hidden);
    EncoderParameters {
        w_icd,
        b_icd: Array2::zeros((dims.hidden, 1)),
        w_atc,
        b_atc: Array2::zeros((dims.hidden, 1)),
        trunk,
        w_mu,
        b_mu: Array2::zeros((dims.k, 1)),
        w_sigma,
        b_sigma: Array2::zeros((dims.k, 1)),
    }
}

/// Normalized bag-of-words matrices, one document per column.
pub fn bow_matrix(docs: &[&PatientDocument], v_icd: usize, v_atc: usize) -> (Array2<f64>, Array2<f64>) {
    let b = docs.len();
    let mut icd = Array2::zeros((v_icd, b));
    let mut atc = Array2::zeros((v_atc, b));
    for (j, doc) in docs.iter().enumerate() {
        let (xi, xa) = normalize_bow(doc, v_icd, v_atc);
        icd.column_mut(j).assign(&xi);
        atc.column_mut(j).assign(&xa);
    }
    (icd, atc)
}

/// Raw count matrices, one document per column.
pub fn count_matrix(docs: &[&PatientDocument], v: usize, modality: Modality) -> Array2<f64> {
    let mut m = Array2::zeros((v, docs.len()));
    for (j, doc) in docs.iter().enumerate() {
        for (&id, &c) in doc.counts(modality) {
            m[(id, j)] = c as f64;
        }
    }
    m
}

/// Topic-by-code distributions from embeddings: softmax over the vocabulary
/// of rho-transpose times alpha, per modality.
pub fn compute_beta(
    rho_icd: &Array2<f64>,
    rho_atc: &Array2<f64>,
    alpha: &TopicEmbeddings,
    shared_alpha: bool,
) -> Result<TopicMatrices> {
    let a_icd = &alpha.alpha_icd;
    let a_atc = if shared_alpha {
        &alpha.alpha_icd
    } else {
        &alpha.alpha_atc
    };
    let logits_icd = rho_icd.t().dot(a_icd);
    let logits_atc = rho_atc.t().dot(a_atc);
    util::ensure_finite(&logits_icd, "icd topic logits")?;
    util::ensure_finite(&logits_atc, "atc topic logits")?;
    Ok(TopicMatrices {
        beta_icd: util::softmax_columns(&logits_icd),
        beta_atc: util::softmax_columns(&logits_atc),
    })
}

/// Encoder forward: per-modality ReLU input layers, elementwise sum,
/// shared ReLU trunk, affine mu and log-sigma heads. Inputs are
/// normalized bag-of-words columns.
pub fn encode(
    enc: &EncoderParameters,
    x_icd: &Array2<f64>,
    x_atc: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let e_icd = (enc.w_icd.dot(x_icd) + &enc.b_icd).mapv(|x| x.max(0.0));
    let e_atc = (enc.w_atc.dot(x_atc) + &enc.b_atc).mapv(|x| x.max(0.0));
    let mut t = e_icd + e_atc;
    for (w, b) in &enc.trunk {
        t = (w.dot(&t) + b).mapv(|x| x.max(0.0));
    }
    let mu = enc.w_mu.dot(&t) + &enc.b_mu;
    let log_sigma = enc.w_sigma.dot(&t) + &enc.b_sigma;
    (mu, log_sigma)
}

/// delta-hat = mu + exp(log-sigma) * noise; theta = column softmax.
pub fn reparameterize(
    mu: &Array2<f64>,
    log_sigma: &Array2<f64>,
    noise: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let delta = mu + &(log_sigma.mapv(f64::exp) * noise);
    let theta = util::softmax_columns(&delta);
    (delta, theta)
}

/// Full variational state of a single document.
pub fn variational_state(
    enc: &EncoderParameters,
    doc: &PatientDocument,
    v_icd: usize,
    v_atc: usize,
    noise: NoiseMode,
) -> VariationalState {
    let docs = [doc];
    let (xi, xa) = bow_matrix(&docs, v_icd, v_atc);
    let (mu, log_sigma) = encode(enc, &xi, &xa);
    let k = mu.nrows();
    let eps = draw_noise(k, 1, noise, &format!("reparam:{}", doc.patient_id));
    let (delta, theta) = reparameterize(&mu, &log_sigma, &eps);
    VariationalState {
        mu: mu.column(0).to_owned(),
        log_sigma: log_sigma.column(0).to_owned(),
        delta_hat: delta.column(0).to_owned(),
        theta: theta.column(0).to_owned(),
    }
}

/// Per-document log-likelihood: sum over modalities and codes of
/// count * log((beta theta)_v), clamped at `LIK_EPS` (clamps counted).
pub fn log_likelihood(
    doc: &PatientDocument,
    theta: &Array1<f64>,
    beta: &TopicMatrices,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut clamped = 0;
    for modality in [Modality::Icd, Modality::Atc] {
        let probs = beta.beta(modality).dot(theta);
        for (&id, &count) in doc.counts(modality) {
            let p = probs[id];
            if p < LIK_EPS {
                clamped += 1;
            }
            total += count as f64 * p.max(LIK_EPS).ln();
        }
    }
    (total, clamped)
}

pub fn kl_to_standard_normal(mu: &Array1<f64>, log_sigma: &Array1<f64>) -> f64 {
    mu.iter()
        .zip(log_sigma.iter())
        .map(|(&m, &ls)| {
            let s2 = (2.0 * ls).exp();
            0.5 * (s2 + m * m - 1.0 - 2.0 * ls)
        })
        .sum()
}

pub fn kl_batch(mu: &Array2<f64>, log_sigma: &Array2<f64>) -> f64 {
    mu.iter()
        .zip(log_sigma.iter())
        .map(|(&m, &ls)| {
            let s2 = (2.0 * ls).exp();
            0.5 * (s2 + m * m - 1.0 - 2.0 * ls)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboValue {
    /// Batch sum of per-document (log-likelihood - KL).
    pub unscaled: f64,
    /// Unscaled value times corpus-size / batch-size.
    pub scaled: f64,
    pub loglik: f64,
    pub kl: f64,
    pub clamped: usize,
}

/// One-sample minibatch ELBO with per-document reparameterized draws.
pub fn elbo_minibatch(
    batch: &[&PatientDocument],
    enc: &EncoderParameters,
    beta: &TopicMatrices,
    corpus_size: usize,
    noise: NoiseMode,
) -> Result<ElboValue> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty minibatch".into()));
    }
    let v_icd = beta.beta_icd.nrows();
    let v_atc = beta.beta_atc.nrows();
    let (xi, xa) = bow_matrix(batch, v_icd, v_atc);
    let (mu, log_sigma) = encode(enc, &xi, &xa);
    let k = mu.nrows();
    let eps = draw_noise(k, batch.len(), noise, "elbo-noise");
    let (_, theta) = reparameterize(&mu, &log_sigma, &eps);

    let mut loglik = 0.0;
    let mut clamped = 0;
    for (j, doc) in batch.iter().enumerate() {
        let (ll, cl) = log_likelihood(doc, &theta.column(j).to_owned(), beta);
        loglik += ll;
        clamped += cl;
    }
    let kl = kl_batch(&mu, &log_sigma);
    if clamped > 0 {
        log::warn!("{clamped} likelihood probabilities clamped at {LIK_EPS}");
    }
    let unscaled = loglik - kl;
    Ok(ElboValue {
        unscaled,
        scaled: unscaled * corpus_size as f64 / batch.len() as f64,
        loglik,
        kl,
        clamped,
    })
}

/// Tape handles of the beta construction.
pub struct BetaTape {
    pub alpha_icd: Var,
    pub alpha_atc: Option<Var>,
    pub beta_icd: Var,
    pub beta_atc: Var,
}

/// Build beta on the tape from rho variables; alpha matrices become
/// trainable leaves (one shared leaf when `shared_alpha`).
pub fn beta_tape(
    tape: &mut Tape,
    rho_icd: Var,
    rho_atc: Var,
    alpha: &TopicEmbeddings,
    shared_alpha: bool,
) -> BetaTape {
    let alpha_icd = tape.leaf(alpha.alpha_icd.clone());
    let alpha_atc = if shared_alpha {
        None
    } else {
        Some(tape.leaf(alpha.alpha_atc.clone()))
    };
    let rho_icd_t = tape.transpose(rho_icd);
    let rho_atc_t = tape.transpose(rho_atc);
    let logits_icd = tape.matmul(rho_icd_t, alpha_icd);
    let logits_atc = tape.matmul(rho_atc_t, alpha_atc.unwrap_or(alpha_icd));
    BetaTape {
        alpha_icd,
        alpha_atc,
        beta_icd: tape.softmax_cols(logits_icd),
        beta_atc: tape.softmax_cols(logits_atc),
    }
}

/// Tape handles of the encoder forward pass.
pub struct EncoderTape {
    /// Parameter name to leaf, in `EncoderParameters::params` order.
    pub leaves: Vec<(String, Var)>,
    pub mu: Var,
    pub log_sigma: Var,
}

pub fn encoder_tape(
    tape: &mut Tape,
    enc: &EncoderParameters,
    x_icd: Array2<f64>,
    x_atc: Array2<f64>,
) -> EncoderTape {
    let w_icd = tape.leaf(enc.w_icd.clone());
    let b_icd = tape.leaf(enc.b_icd.clone());
    let w_atc = tape.leaf(enc.w_atc.clone());
    let b_atc = tape.leaf(enc.b_atc.clone());
    let xi = tape.constant(x_icd);
    let xa = tape.constant(x_atc);

    let mut leaves = vec![
        ("enc.w_icd".to_string(), w_icd),
        ("enc.b_icd".to_string(), b_icd),
        ("enc.w_atc".to_string(), w_atc),
        ("enc.b_atc".to_string(), b_atc),
    ];

    let hi = tape.matmul(w_icd, xi);
    let hi = tape.add_col_vec(hi, b_icd);
    let e_icd = tape.relu(hi);
    let ha = tape.matmul(w_atc, xa);
    let ha = tape.add_col_vec(ha, b_atc);
    let e_atc = tape.relu(ha);
    let mut t = tape.add(e_icd, e_atc);

    for (i, (w, b)) in enc.trunk.iter().enumerate() {
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        leaves.push((format!("enc.trunk{i}.w"), wv));
        leaves.push((format!("enc.trunk{i}.b"), bv));
        let z = tape.matmul(wv, t);
        let z = tape.add_col_vec(z, bv);
        t = tape.relu(z);
    }

    let w_mu = tape.leaf(enc.w_mu.clone());
    let b_mu = tape.leaf(enc.b_mu.clone());
    let w_sigma = tape.leaf(enc.w_sigma.clone());
    let b_sigma = tape.leaf(enc.b_sigma.clone());
    leaves.push(("enc.w_mu".to_string(), w_mu));
    leaves.push(("enc.b_mu".to_string(), b_mu));
    leaves.push(("enc.w_sigma".to_string(), w_sigma));
    leaves.push(("enc.b_sigma".to_string(), b_sigma));

    let zm = tape.matmul(w_mu, t);
    let mu = tape.add_col_vec(zm, b_mu);
    let zs = tape.matmul(w_sigma, t);
    let log_sigma = tape.add_col_vec(zs, b_sigma);

    EncoderTape {
        leaves,
        mu,
        log_sigma,
    }
}

/// Tape handles of the ELBO objective.
pub struct ElboTape {
    pub theta: Var,
    pub loglik: Var,
    pub kl: Var,
    /// Batch-sum ELBO (unscaled).
    pub elbo: Var,
}

/// Assemble the reparameterized one-sample ELBO from beta and encoder
/// outputs plus fixed noise and count matrices.
pub fn elbo_tape(
    tape: &mut Tape,
    beta_icd: Var,
    beta_atc: Var,
    mu: Var,
    log_sigma: Var,
    noise: Array2<f64>,
    counts_icd: Array2<f64>,
    counts_atc: Array2<f64>,
) -> ElboTape {
    let eps = tape.constant(noise);
    let sigma = tape.exp(log_sigma);
    let scaled_noise = tape.mul(sigma, eps);
    let delta = tape.add(mu, scaled_noise);
    let theta = tape.softmax_cols(delta);

    let ci = tape.constant(counts_icd);
    let ca = tape.constant(counts_atc);
    let mix_icd = tape.matmul(beta_icd, theta);
    let mix_atc = tape.matmul(beta_atc, theta);
    let log_icd = tape.log_clamped(mix_icd);
    let log_atc = tape.log_clamped(mix_atc);
    let term_icd = tape.mul(ci, log_icd);
    let term_atc = tape.mul(ca, log_atc);
    let ll_icd = tape.sum_all(term_icd);
    let ll_atc = tape.sum_all(term_atc);
    let loglik = tape.add(ll_icd, ll_atc);

    let two_ls = tape.scale(log_sigma, 2.0);
    let s2 = tape.exp(two_ls);
    let m2 = tape.mul(mu, mu);
    let sum1 = tape.add(s2, m2);
    let sum2 = tape.add_scalar(sum1, -1.0);
    let sum3 = tape.sub(sum2, two_ls);
    let kl_sum = tape.sum_all(sum3);
    let kl = tape.scale(kl_sum, 0.5);

    let elbo = tape.sub(loglik, kl);
    ElboTape {
        theta,
        loglik,
        kl,
        elbo,
    }
}

/// Log of the exact marginal likelihood of one document on a K=2 model,
/// by trapezoid quadrature of the prior integral over delta.
pub fn marginal_loglik_quadrature(
    doc: &PatientDocument,
    beta: &TopicMatrices,
    half_range: f64,
    step: f64,
) -> f64 {
    assert_eq!(beta.beta_icd.ncols(), 2, "quadrature oracle is 2-topic only");
    let n = (2.0 * half_range / step).round() as usize + 1;
    let grid: Vec<f64> = (0..n).map(|i| -half_range + i as f64 * step).collect();
    let log_prior = |x: f64, y: f64| {
        -(x * x + y * y) / 2.0 - (2.0 * std::f64::consts::PI).ln()
    };
    let mut log_terms = Vec::with_capacity(n * n);
    for (i, &x) in grid.iter().enumerate() {
        for (j, &y) in grid.iter().enumerate() {
            let theta = util::softmax(&ndarray::arr1(&[x, y]));
            let (ll, _) = log_likelihood(doc, &theta, beta);
            let mut w: f64 = 1.0;
            if i == 0 || i == n - 1 {
                w *= 0.5;
            }
            if j == 0 || j == n - 1 {
                w *= 0.5;
            }
            log_terms.push(log_prior(x, y) + ll + w.ln());
        }
    }
    let m = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = log_terms.iter().map(|&t| (t - m).exp()).sum();
    m + sum.ln() + 2.0 * step.ln()
}

/// Exact expected log-likelihood under q = N(mu, diag sigma^2) on a K=2
/// model, by trapezoid quadrature; combined with the closed-form KL this
/// gives the exact ELBO.
pub fn expected_loglik_quadrature(
    doc: &PatientDocument,
    beta: &TopicMatrices,
    mu: &Array1<f64>,
    log_sigma: &Array1<f64>,
    half_range: f64,
    step: f64,
) -> f64 {
    assert_eq!(beta.beta_icd.ncols(), 2, "quadrature oracle is 2-topic only");
    let n = (2.0 * half_range / step).round() as usize + 1;
    let mut total = 0.0;
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut w = 1.0;
            if i == 0 || i == n - 1 {
                w *= 0.5;
            }
            if j == 0 || j == n - 1 {
                w *= 0.5;
            }
            let x = mu[0] + (-half_range + i as f64 * step) * log_sigma[0].exp();
            let y = mu[1] + (-half_range + j as f64 * step) * log_sigma[1].exp();
            let zx = (x - mu[0]) / log_sigma[0].exp();
            let zy = (y - mu[1]) / log_sigma[1].exp();
            let q = (-0.5 * (zx * zx + zy * zy)).exp()
                / (2.0 * std::f64::consts::PI);
            let theta = util::softmax(&ndarray::arr1(&[x, y]));
            let (ll, _) = log_likelihood(doc, &theta, beta);
            let weight = w * q * step * step;
            total += weight * ll;
            mass += weight;
        }
    }
    total / mass
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn dims() -> ModelDims {
        ModelDims {
            v_icd: 3,
            v_atc: 2,
            k: 2,
            l: 4,
            hidden: 5,
            trunk_depth: 1,
            shared_alpha: false,
        }
    }

    fn random_matrix(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = util::derived_rng(seed, "model-test");
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn doc_icd_atc() -> PatientDocument {
        let mut d = PatientDocument::new("p0");
        d.add(Modality::Icd, 0, 1);
        d.add(Modality::Icd, 2, 2);
        d.add(Modality::Atc, 1, 1);
        d
    }

    #[test]
    fn beta_uniform_for_zero_rho() {
        let d = dims();
        let alpha = init_topic_embeddings(&d, 1);
        let rho_icd = Array2::zeros((d.l, d.v_icd));
        let rho_atc = Array2::zeros((d.l, d.v_atc));
        let beta = compute_beta(&rho_icd, &rho_atc, &alpha, false).unwrap();
        for col in beta.beta_icd.columns() {
            for &x in col {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        for col in beta.beta_atc.columns() {
            for &x in col {
                assert!((x - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn beta_closed_form_two_codes() {
        let rho_icd = ndarray::arr2(&[[3f64.ln(), 1f64.ln()]]);
        let rho_atc = ndarray::arr2(&[[0.0, 0.0]]);
        let alpha = TopicEmbeddings {
            alpha_icd: ndarray::arr2(&[[1.0]]),
            alpha_atc: ndarray::arr2(&[[1.0]]),
        };
        let beta = compute_beta(&rho_icd, &rho_atc, &alpha, false).unwrap();
        assert!((beta.beta_icd[(0, 0)] - 0.75).abs() < 1e-12);
        assert!((beta.beta_icd[(1, 0)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn beta_matches_exp_normalize_oracle() {
        let d = dims();
        let alpha = init_topic_embeddings(&d, 2);
        let rho_icd = random_matrix(d.l, d.v_icd, 3);
        let rho_atc = random_matrix(d.l, d.v_atc, 4);
        let beta = compute_beta(&rho_icd, &rho_atc, &alpha, false).unwrap();
        let logits = rho_icd.t().dot(&alpha.alpha_icd);
        for k in 0..d.k {
            let z: f64 = logits.column(k).iter().map(|&x| x.exp()).sum();
            for v in 0..d.v_icd {
                let expected = logits[(v, k)].exp() / z;
                assert!((beta.beta_icd[(v, k)] - expected).abs() < 1e-12);
            }
        }
        beta.validate().unwrap();
    }

    #[test]
    fn beta_columns_stochastic_over_random_draws() {
        for seed in 0..30 {
            let d = dims();
            let alpha = init_topic_embeddings(&d, seed);
            let rho_icd = random_matrix(d.l, d.v_icd, seed + 50);
            let rho_atc = random_matrix(d.l, d.v_atc, seed + 90);
            let beta = compute_beta(&rho_icd, &rho_atc, &alpha, seed % 2 == 0).unwrap();
            beta.validate().unwrap();
        }
    }

    #[test]
    fn beta_per_topic_logit_shift_invariance() {
        let d = dims();
        let alpha = init_topic_embeddings(&d, 7);
        let rho_icd = random_matrix(d.l, d.v_icd, 8);
        let rho_atc = random_matrix(d.l, d.v_atc, 9);
        let beta = compute_beta(&rho_icd, &rho_atc, &alpha, false).unwrap();

        let logits = rho_icd.t().dot(&alpha.alpha_icd);
        let shifts = [1.7, -42.0];
        let mut shifted = logits.clone();
        for (k, &c) in shifts.iter().enumerate() {
            shifted.column_mut(k).mapv_inplace(|x| x + c);
        }
        let beta_shifted = util::softmax_columns(&shifted);
        for (a, b) in beta.beta_icd.iter().zip(beta_shifted.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_zero_weights_passes_biases() {
        let d = dims();
        let mut enc = init_encoder(&d, 1);
        enc.w_icd.fill(0.0);
        enc.w_atc.fill(0.0);
        for (w, _) in enc.trunk.iter_mut() {
            w.fill(0.0);
        }
        enc.w_mu.fill(0.0);
        enc.w_sigma.fill(0.0);
        enc.b_mu.fill(0.3);
        enc.b_sigma.fill(-0.7);
        let doc = doc_icd_atc();
        let docs = [&doc];
        let (xi, xa) = bow_matrix(&docs, d.v_icd, d.v_atc);
        let (mu, ls) = encode(&enc, &xi, &xa);
        assert!(mu.iter().all(|&x| (x - 0.3).abs() < 1e-12));
        assert!(ls.iter().all(|&x| (x + 0.7).abs() < 1e-12));
    }

    #[test]
    fn encode_handles_empty_modality() {
        let d = dims();
        let enc = init_encoder(&d, 2);
        let mut doc = PatientDocument::new("icd-only");
        doc.add(Modality::Icd, 1, 3);
        let docs = [&doc];
        let (xi, xa) = bow_matrix(&docs, d.v_icd, d.v_atc);
        assert!(xa.iter().all(|&x| x == 0.0));
        let (mu, ls) = encode(&enc, &xi, &xa);
        assert!(mu.iter().all(|x| x.is_finite()));
        assert!(ls.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn encode_matches_dense_oracle() {
        let d = ModelDims {
            v_icd: 3,
            v_atc: 2,
            k: 2,
            l: 4,
            hidden: 2,
            trunk_depth: 0,
            shared_alpha: false,
        };
        let enc = init_encoder(&d, 3);
        let doc = doc_icd_atc();
        let docs = [&doc];
        let (xi, xa) = bow_matrix(&docs, d.v_icd, d.v_atc);
        let (mu, _) = encode(&enc, &xi, &xa);

        let mut e = vec![0.0; d.hidden];
        for h in 0..d.hidden {
            let mut zi = enc.b_icd[(h, 0)];
            for v in 0..d.v_icd {
                zi += enc.w_icd[(h, v)] * xi[(v, 0)];
            }
            let mut za = enc.b_atc[(h, 0)];
            for v in 0..d.v_atc {
                za += enc.w_atc[(h, v)] * xa[(v, 0)];
            }
            e[h] = zi.max(0.0) + za.max(0.0);
        }
        for k in 0..d.k {
            let mut m = enc.b_mu[(k, 0)];
            for h in 0..d.hidden {
                m += enc.w_mu[(k, h)] * e[h];
            }
            assert!((mu[(k, 0)] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn reparameterize_zero_noise_limit() {
        let mu = ndarray::arr2(&[[0.4], [-1.1]]);
        let ls = Array2::from_elem((2, 1), -30.0);
        let noise = random_matrix(2, 1, 5);
        let (_, theta) = reparameterize(&mu, &ls, &noise);
        let expected = util::softmax(&arr1(&[0.4, -1.1]));
        for (a, b) in theta.column(0).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn reparameterize_zero_mu_sigma_is_uniform() {
        let mu = Array2::zeros((3, 1));
        let ls = Array2::from_elem((3, 1), -30.0);
        let noise = random_matrix(3, 1, 6);
        let (_, theta) = reparameterize(&mu, &ls, &noise);
        for &x in theta.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reparameterize_mean_matches_mu() {
        let k = 3;
        let n = 100_000;
        let mu = ndarray::arr2(&[[0.5], [-0.25], [1.0]]);
        let ls = ndarray::arr2(&[[0.1], [-0.3], [0.0]]);
        let noise = draw_noise(k, n, NoiseMode::Seeded(7), "mc-mean");
        let big_mu = mu
            .broadcast((k, n))
            .unwrap()
            .to_owned();
        let big_ls = ls.broadcast((k, n)).unwrap().to_owned();
        let (delta, _) = reparameterize(&big_mu, &big_ls, &noise);
        for kk in 0..k {
            let mean: f64 = delta.row(kk).sum() / n as f64;
            let sd = ls[(kk, 0)].exp();
            let se = sd / (n as f64).sqrt();
            assert!(
                (mean - mu[(kk, 0)]).abs() < 3.0 * se,
                "component {kk}: {mean} vs {}",
                mu[(kk, 0)]
            );
        }
    }

    #[test]
    fn loglik_single_topic_ignores_theta() {
        let beta = TopicMatrices {
            beta_icd: ndarray::arr2(&[[0.2], [0.3], [0.5]]),
            beta_atc: ndarray::arr2(&[[0.6], [0.4]]),
        };
        let doc = doc_icd_atc();
        let (ll, _) = log_likelihood(&doc, &arr1(&[1.0]), &beta);
        let expected = 0.2f64.ln() + 2.0 * 0.5f64.ln() + 0.4f64.ln();
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn loglik_uniform_beta_single_token() {
        let beta = TopicMatrices {
            beta_icd: Array2::from_elem((4, 2), 0.25),
            beta_atc: Array2::from_elem((5, 2), 0.2),
        };
        let mut doc = PatientDocument::new("p");
        doc.add(Modality::Icd, 2, 1);
        let theta = arr1(&[0.3, 0.7]);
        let (ll, _) = log_likelihood(&doc, &theta, &beta);
        assert!((ll - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loglik_matches_token_enumeration_oracle() {
        let d = dims();
        let alpha = init_topic_embeddings(&d, 11);
        let rho_icd = random_matrix(d.l, d.v_icd, 12);
        let rho_atc = random_matrix(d.l, d.v_atc, 13);
        let beta = compute_beta(&rho_icd, &rho_atc, &alpha, false).unwrap();
        let theta = util::softmax(&arr1(&[0.3, -0.8]));
        for doc in [doc_icd_atc()] {
            let (ll, _) = log_likelihood(&doc, &theta, &beta);
            let mut oracle = 0.0;
            for (modality, id) in doc.expand_tokens() {
                let b = beta.beta(modality);
                let mut p = 0.0;
                for k in 0..d.k {
                    p += b[(id, k)] * theta[k];
                }
                oracle += p.ln();
            }
            assert!((ll - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn kl_closed_form_values() {
        assert!(kl_to_standard_normal(&arr1(&[0.0, 0.0]), &arr1(&[0.0, 0.0])).abs() < 1e-12);
        let kl = kl_to_standard_normal(&arr1(&[1.0, 0.0, 0.0]), &arr1(&[0.0, 0.0, 0.0]));
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_and_zero_only_at_origin() {
        let mut rng = util::derived_rng(3, "kl-test");
        for _ in 0..200 {
            let mu = arr1(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
            let ls = arr1(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let kl = kl_to_standard_normal(&mu, &ls);
            assert!(kl >= 0.0);
            let norm = mu.dot(&mu) + ls.dot(&ls);
            if kl < 1e-12 {
                assert!(norm < 1e-10);
            }
        }
    }

    #[test]
    fn kl_matches_monte_carlo_oracle() {
        let mu = arr1(&[0.7, -0.4]);
        let ls = arr1(&[0.2, -0.5]);
        let analytic = kl_to_standard_normal(&mu, &ls);
        let n = 1_000_000;
        let noise = draw_noise(2, n, NoiseMode::Seeded(9), "kl-mc");
        let mut total = 0.0;
        for j in 0..n {
            let mut log_q = 0.0;
            let mut log_p = 0.0;
            for k in 0..2 {
                let sd = ls[k].exp();
                let x = mu[k] + sd * noise[(k, j)];
                let zq = (x - mu[k]) / sd;
                log_q += -0.5 * zq * zq - sd.ln();
                log_p += -0.5 * x * x;
            }
            total += log_q - log_p;
        }
        let mc = total / n as f64;
        assert!(
            (mc - analytic).abs() / analytic.abs() < 0.01,
            "mc {mc} vs analytic {analytic}"
        );
    }

    #[test]
    fn elbo_uniform_beta_zero_noise_closed_form() {
        let d = dims();
        let enc = init_encoder(&d, 21);
        let beta = TopicMatrices {
            beta_icd: Array2::from_elem((d.v_icd, d.k), 1.0 / d.v_icd as f64),
            beta_atc: Array2::from_elem((d.v_atc, d.k), 1.0 / d.v_atc as f64),
        };
        let mut doc = PatientDocument::new("icd-only");
        doc.add(Modality::Icd, 0, 2);
        doc.add(Modality::Icd, 2, 1);
        let batch = [&doc];
        let elbo = elbo_minibatch(&batch, &enc, &beta, 1, NoiseMode::Zero).unwrap();

        let (xi, xa) = bow_matrix(&batch, d.v_icd, d.v_atc);
        let (mu, ls) = encode(&enc, &xi, &xa);
        let expected_ll = 3.0 * (1.0 / d.v_icd as f64).ln();
        let expected = expected_ll - kl_batch(&mu, &ls);
        assert!((elbo.unscaled - expected).abs() < 1e-10);
        assert!((elbo.loglik - expected_ll).abs() < 1e-10);
    }

    #[test]
    fn elbo_zero_noise_equals_softmax_mu_form() {
        let d = dims();
        let enc = init_encoder(&d, 22);
        let alpha = init_topic_embeddings(&d, 23);
        let rho_icd = random_matrix(d.l, d.v_icd, 24);
        let rho_atc = random_matrix(d.l, d.v_atc, 25);
        let beta = compute_beta(&rho_icd, &rho_atc, &alpha, false).unwrap();
        let doc = doc_icd_atc();
        let batch = [&doc];
        let elbo = elbo_minibatch(&batch, &enc, &beta, 10, NoiseMode::Zero).unwrap();

        let (xi, xa) = bow_matrix(&batch, d.v_icd, d.v_atc);
        let (mu, ls) = encode(&enc, &xi, &xa);
        let theta = util::softmax(&mu.column(0).to_owned());
        let (ll, _) = log_likelihood(&doc, &theta, &beta);
        let expected = ll - kl_batch(&mu, &ls);
        assert!((elbo.unscaled - expected).abs() < 1e-10);
        assert!((elbo.scaled - expected * 10.0).abs() < 1e-9);
    }

    #[test]
    fn elbo_below_quadrature_marginal() {
        let k2 = ModelDims { k: 2, ..dims() };
        let doc = doc_icd_atc();
        for seed in 0..3 {
            let alpha = init_topic_embeddings(&k2, seed);
            let rho_icd = random_matrix(k2.l, k2.v_icd, seed + 30);
            let rho_atc = random_matrix(k2.l, k2.v_atc, seed + 60);
            let beta = compute_beta(&rho_icd, &rho_atc, &alpha, false).unwrap();
            let enc = init_encoder(&k2, seed + 90);
            let batch = [&doc];
            let (xi, xa) = bow_matrix(&batch, k2.v_icd, k2.v_atc);
            let (mu, ls) = encode(&enc, &xi, &xa);
            let mu1 = mu.column(0).to_owned();
            let ls1 = ls.column(0).to_owned();

            let eq_ll = expected_loglik_quadrature(&doc, &beta, &mu1, &ls1, 8.0, 0.02);
            let exact_elbo = eq_ll - kl_to_standard_normal(&mu1, &ls1);
            let marginal = marginal_loglik_quadrature(&doc, &beta, 8.0, 0.02);
            assert!(
                exact_elbo <= marginal + 1e-6,
                "seed {seed}: elbo {exact_elbo} vs marginal {marginal}"
            );
        }
    }

    #[test]
    fn tape_elbo_matches_plain_elbo() {
        let d = dims();
        let enc = init_encoder(&d, 31);
        let alpha = init_topic_embeddings(&d, 32);
        let rho_icd = random_matrix(d.l, d.v_icd, 33);
        let rho_atc = random_matrix(d.l, d.v_atc, 34);
        let beta = compute_beta(&rho_icd, &rho_atc, &alpha, false).unwrap();

        let d1 = doc_icd_atc();
        let mut d2 = PatientDocument::new("p1");
        d2.add(Modality::Icd, 1, 4);
        d2.add(Modality::Atc, 0, 2);
        let batch = [&d1, &d2];

        let k = d.k;
        let noise = draw_noise(k, 2, NoiseMode::Seeded(35), "tape-match");
        let (xi, xa) = bow_matrix(&batch, d.v_icd, d.v_atc);
        let (mu, ls) = encode(&enc, &xi, &xa);
        let (_, theta) = reparameterize(&mu, &ls, &noise);
        let mut plain_ll = 0.0;
        for (j, doc) in batch.iter().enumerate() {
            plain_ll += log_likelihood(doc, &theta.column(j).to_owned(), &beta).0;
        }
        let plain_elbo = plain_ll - kl_batch(&mu, &ls);

        let mut tape = Tape::new();
        let rho_icd_var = tape.constant(rho_icd.clone());
        let rho_atc_var = tape.constant(rho_atc.clone());
        let bt = beta_tape(&mut tape, rho_icd_var, rho_atc_var, &alpha, false);
        let et = encoder_tape(&mut tape, &enc, xi.clone(), xa.clone());
        let ci = count_matrix(&batch, d.v_icd, Modality::Icd);
        let ca = count_matrix(&batch, d.v_atc, Modality::Atc);
        let lt = elbo_tape(
            &mut tape, bt.beta_icd, bt.beta_atc, et.mu, et.log_sigma, noise, ci, ca,
        );
        let taped = tape.value(lt.elbo)[(0, 0)];
        assert!(
            (taped - plain_elbo).abs() < 1e-10,
            "tape {taped} vs plain {plain_elbo}"
        );

        let beta_taped = tape.value(bt.beta_icd);
        for (a, b) in beta_taped.iter().zip(beta.beta_icd.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let theta_taped = tape.value(lt.theta);
        for (a, b) in theta_taped.iter().zip(theta.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        let d = ModelDims {
            v_icd: 6,
            v_atc: 4,
            k: 3,
            l: 4,
            hidden: 5,
            trunk_depth: 1,
            shared_alpha: false,
        };
        let enc0 = init_encoder(&d, 41);
        let alpha0 = init_topic_embeddings(&d, 42);
        let rho_icd0 = random_matrix(d.l, d.v_icd, 43);
        let rho_atc0 = random_matrix(d.l, d.v_atc, 44);
        let mut doc_a = PatientDocument::new("a");
        doc_a.add(Modality::Icd, 0, 2);
        doc_a.add(Modality::Icd, 5, 1);
        doc_a.add(Modality::Atc, 3, 2);
        let mut doc_b = PatientDocument::new("b");
        doc_b.add(Modality::Icd, 2, 3);
        doc_b.add(Modality::Atc, 0, 1);
        doc_b.add(Modality::Atc, 1, 1);
        let batch = [&doc_a, &doc_b];
        let noise = draw_noise(d.k, 2, NoiseMode::Seeded(45), "fd-elbo");

        let eval = |enc: &EncoderParameters,
                    alpha: &TopicEmbeddings,
                    rho_icd: &Array2<f64>,
                    rho_atc: &Array2<f64>| {
            let beta = compute_beta(rho_icd, rho_atc, alpha, false).unwrap();
            let (xi, xa) = bow_matrix(&batch, d.v_icd, d.v_atc);
            let (mu, ls) = encode(enc, &xi, &xa);
            let (_, theta) = reparameterize(&mu, &ls, &noise);
            let mut ll = 0.0;
            for (j, doc) in batch.iter().enumerate() {
                ll += log_likelihood(doc, &theta.column(j).to_owned(), &beta).0;
            }
            ll - kl_batch(&mu, &ls)
        };

        let mut tape = Tape::new();
        let rho_icd_var = tape.leaf(rho_icd0.clone());
        let rho_atc_var = tape.leaf(rho_atc0.clone());
        let bt = beta_tape(&mut tape, rho_icd_var, rho_atc_var, &alpha0, false);
        let (xi, xa) = bow_matrix(&batch, d.v_icd, d.v_atc);
        let et = encoder_tape(&mut tape, &enc0, xi, xa);
        let ci = count_matrix(&batch, d.v_icd, Modality::Icd);
        let ca = count_matrix(&batch, d.v_atc, Modality::Atc);
        let lt = elbo_tape(
            &mut tape,
            bt.beta_icd,
            bt.beta_atc,
            et.mu,
            et.log_sigma,
            noise.clone(),
            ci,
            ca,
        );
        let grads = tape.backward_scalar(lt.elbo).unwrap();

        fn fd_compare<F: FnMut(usize, usize, f64) -> f64>(
            analytic: &Array2<f64>,
            mut evalp: F,
            checked: &mut usize,
        ) {
            let h = 1e-5;
            for r in 0..analytic.nrows() {
                for c in 0..analytic.ncols() {
                    let fd = (evalp(r, c, h) - evalp(r, c, -h)) / (2.0 * h);
                    let a = analytic[(r, c)];
                    let denom = a.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        ((a - fd) / denom).abs() < 1e-4,
                        "({r},{c}): analytic {a} vs fd {fd}"
                    );
                    *checked += 1;
                }
            }
        }

        let mut checked = 0usize;
        let g = grads.of(&tape, rho_icd_var);
        fd_compare(
            &g,
            |r, c, eps| {
                let mut p = rho_icd0.clone();
                p[(r, c)] += eps;
                eval(&enc0, &alpha0, &p, &rho_atc0)
            },
            &mut checked,
        );
        let g = grads.of(&tape, rho_atc_var);
        fd_compare(
            &g,
            |r, c, eps| {
                let mut p = rho_atc0.clone();
                p[(r, c)] += eps;
                eval(&enc0, &alpha0, &rho_icd0, &p)
            },
            &mut checked,
        );
        let g = grads.of(&tape, bt.alpha_icd);
        fd_compare(
            &g,
            |r, c, eps| {
                let mut a = alpha0.clone();
                a.alpha_icd[(r, c)] += eps;
                eval(&enc0, &a, &rho_icd0, &rho_atc0)
            },
            &mut checked,
        );
        let g = grads.of(&tape, bt.alpha_atc.unwrap());
        fd_compare(
            &g,
            |r, c, eps| {
                let mut a = alpha0.clone();
                a.alpha_atc[(r, c)] += eps;
                eval(&enc0, &a, &rho_icd0, &rho_atc0)
            },
            &mut checked,
        );
        for (name, var) in &et.leaves {
            let g = grads.of(&tape, *var);
            fd_compare(
                &g,
                |r, c, eps| {
                    let mut e = enc0.clone();
                    for (n, p) in e.params_mut() {
                        if n == *name {
                            p[(r, c)] += eps;
                        }
                    }
                    eval(&e, &alpha0, &rho_icd0, &rho_atc0)
                },
                &mut checked,
            );
        }
        assert!(checked > 150, "checked only {checked} coordinates");
    }

    #[test]
    fn shared_alpha_ties_modalities() {
        let d = ModelDims {
            shared_alpha: true,
            v_atc: 3,
            ..dims()
        };
        let alpha = init_topic_embeddings(&d, 51);
        let rho_icd = random_matrix(d.l, d.v_icd, 52);
        let rho_atc = random_matrix(d.l, d.v_atc, 53);
        let beta = compute_beta(&rho_icd, &rho_atc, &alpha, true).unwrap();
        let expected_atc = util::softmax_columns(&rho_atc.t().dot(&alpha.alpha_icd));
        for (a, b) in beta.beta_atc.iter().zip(expected_atc.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut tape = Tape::new();
        let ri = tape.constant(rho_icd);
        let ra = tape.constant(rho_atc);
        let bt = beta_tape(&mut tape, ri, ra, &alpha, true);
        assert!(bt.alpha_atc.is_none());
        for (a, b) in tape.value(bt.beta_atc).iter().zip(beta.beta_atc.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn theta_on_simplex_over_random_draws() {
        for seed in 0..100 {
            let mu = random_matrix(4, 3, seed);
            let ls = random_matrix(4, 3, seed + 1000);
            let noise = draw_noise(4, 3, NoiseMode::Seeded(seed), "simplex");
            let (_, theta) = reparameterize(&mu, &ls, &noise);
            for col in theta.columns() {
                let s: f64 = col.sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(col.iter().all(|&x| x > 0.0));
            }
        }
    }
}
