use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{lit, Activation, DenseLayer, LayerCache, Matrix, Mlp, MlpCache, ParamBlock, Parameters, Scalar};
use crate::seeding::{rng_from, tags};

/// Architecture sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub frames: usize,
    pub n_contents: usize,
    pub latent_dim: usize,
    /// Widths of the per-frame encoder layers (tanh).
    pub encoder_hidden: Vec<usize>,
    /// Widths of the decoder hidden layers (tanh).
    pub decoder_hidden: Vec<usize>,
}

impl ModelDims {
    pub fn new(feature_dim: usize, frames: usize, n_contents: usize) -> Self {
        Self {
            feature_dim,
            frames,
            n_contents,
            latent_dim: 32,
            encoder_hidden: vec![64],
            decoder_hidden: vec![64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.feature_dim, self.frames, self.n_contents, self.latent_dim];
        if sizes.contains(&0) || self.encoder_hidden.is_empty() || self.encoder_hidden.contains(&0) {
            return Err(Error::Config(format!("invalid model dimensions {self:?}")));
        }
        if self.decoder_hidden.contains(&0) {
            return Err(Error::Config(format!(
                "invalid decoder widths {:?}",
                self.decoder_hidden
            )));
        }
        Ok(())
    }
}

/// All trainable weights: reference encoder, conditional frame decoder and
/// the lookup-table baseline.
///
/// Encoder: a per-frame MLP, mean pooling over time, then a linear `μ` head
/// and a softplus `σ` head that share the pooled vector. Decoder: an MLP on
/// `[z ; one_hot(content)]` producing all `T × F` frames at once.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar = f64> {
    pub dims: ModelDims,
    pub encoder_frames: Mlp<T>,
    pub mu_head: DenseLayer<T>,
    pub sigma_head: DenseLayer<T>,
    pub decoder: Mlp<T>,
    /// One row per training speaker, `latent_dim` wide.
    pub baseline_table: Matrix<T>,
    /// Speaker id of each table row, ascending.
    pub table_speakers: Vec<u32>,
}

impl<T: Scalar> Parameters<T> for ModelParams<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamBlock<'_, T>)) {
        self.encoder_frames.visit_prefixed("encoder.frame", f);
        visit_dense("encoder.mu", &self.mu_head, f);
        visit_dense("encoder.sigma", &self.sigma_head, f);
        self.decoder.visit_prefixed("decoder", f);
        f(ParamBlock {
            name: "baseline.table".into(),
            shape: self.baseline_table.shape(),
            data: self.baseline_table.as_slice(),
        });
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        self.encoder_frames.visit_prefixed_mut("encoder.frame", f);
        f("encoder.mu.weight", self.mu_head.weights.as_mut_slice());
        f("encoder.mu.bias", &mut self.mu_head.bias);
        f("encoder.sigma.weight", self.sigma_head.weights.as_mut_slice());
        f("encoder.sigma.bias", &mut self.sigma_head.bias);
        self.decoder.visit_prefixed_mut("decoder", f);
        f("baseline.table", self.baseline_table.as_mut_slice());
    }
}

fn visit_dense<T: Scalar>(prefix: &str, layer: &DenseLayer<T>, f: &mut dyn FnMut(ParamBlock<'_, T>)) {
    f(ParamBlock {
        name: format!("{prefix}.weight"),
        shape: layer.weights.shape(),
        data: layer.weights.as_slice(),
    });
    f(ParamBlock {
        name: format!("{prefix}.bias"),
        shape: (layer.bias.len(), 1),
        data: &layer.bias,
    });
}

/// Cached activations of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderCache<T: Scalar = f64> {
    frames: Vec<MlpCache<T>>,
    mu: LayerCache<T>,
    sigma: LayerCache<T>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<T: Scalar = f64> {
    mlp: MlpCache<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-initialized model with a lookup row for each of `table_speakers`.
    pub fn init(dims: ModelDims, table_speakers: &[u32], seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = rng_from(seed, &[tags::MODEL_INIT]);
        Self::init_with_rng(dims, table_speakers, &mut rng)
    }

    pub fn init_with_rng<R: Rng + ?Sized>(dims: ModelDims, table_speakers: &[u32], rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut enc_sizes = vec![dims.feature_dim];
        enc_sizes.extend(&dims.encoder_hidden);
        let encoder_frames = Mlp::glorot(&enc_sizes, Activation::Tanh, Activation::Tanh, rng)?;
        let pooled = *dims.encoder_hidden.last().unwrap();
        let mu_head = DenseLayer::glorot(pooled, dims.latent_dim, Activation::Identity, rng);
        let sigma_head = DenseLayer::glorot(pooled, dims.latent_dim, Activation::Softplus, rng);
        let mut dec_sizes = vec![dims.latent_dim + dims.n_contents];
        dec_sizes.extend(&dims.decoder_hidden);
        dec_sizes.push(dims.frames * dims.feature_dim);
        let decoder = Mlp::glorot(&dec_sizes, Activation::Tanh, Activation::Identity, rng)?;

        let mut speakers = table_speakers.to_vec();
        speakers.sort_unstable();
        speakers.dedup();
        if speakers.len() != table_speakers.len() {
            return Err(Error::Config("duplicate speaker ids in baseline table".into()));
        }
        let limit = crate::ndcore::glorot_limit(speakers.len(), dims.latent_dim);
        let baseline_table = Matrix::from_fn(speakers.len(), dims.latent_dim, |_, _| {
            lit(rng.random_range(-limit..=limit))
        });
        Ok(Self {
            dims,
            encoder_frames,
            mu_head,
            sigma_head,
            decoder,
            baseline_table,
            table_speakers: speakers,
        })
    }

    /// Gradient buffer: a zeroed copy of the parameters.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    fn check_frames(&self, frames: &Matrix<T>) -> Result<()> {
        if frames.cols() != self.dims.feature_dim || frames.rows() == 0 {
            return Err(Error::shape(
                "encode",
                frames.shape(),
                (self.dims.frames, self.dims.feature_dim),
            ));
        }
        Ok(())
    }

    fn pooled(&self, frames: &Matrix<T>) -> Result<Vec<T>> {
        self.check_frames(frames)?;
        let width = self.encoder_frames.output_dim();
        let mut pooled = vec![T::zero(); width];
        for row in frames.row_iter() {
            for (p, h) in pooled.iter_mut().zip(self.encoder_frames.apply(row)?) {
                *p += h;
            }
        }
        let n = T::from_usize(frames.rows()).unwrap();
        pooled.iter_mut().for_each(|p| *p /= n);
        Ok(pooled)
    }

    /// Posterior parameters `(μ, σ)` for a `T × F` frame matrix.
    pub fn encode(&self, frames: &Matrix<T>) -> Result<(Vec<T>, Vec<T>)> {
        let pooled = self.pooled(frames)?;
        Ok((self.mu_head.apply(&pooled)?, self.sigma_head.apply(&pooled)?))
    }

    /// Posterior mean only.
    pub fn encode_mean(&self, frames: &Matrix<T>) -> Result<Vec<T>> {
        self.mu_head.apply(&self.pooled(frames)?)
    }

    pub fn encode_with_cache(&self, frames: &Matrix<T>) -> Result<(Vec<T>, Vec<T>, EncoderCache<T>)> {
        self.check_frames(frames)?;
        let width = self.encoder_frames.output_dim();
        let mut pooled = vec![T::zero(); width];
        let mut caches = Vec::with_capacity(frames.rows());
        for row in frames.row_iter() {
            let (h, c) = self.encoder_frames.forward(row)?;
            for (p, v) in pooled.iter_mut().zip(h) {
                *p += v;
            }
            caches.push(c);
        }
        let n = T::from_usize(frames.rows()).unwrap();
        pooled.iter_mut().for_each(|p| *p /= n);
        let (mu, mu_cache) = self.mu_head.forward(&pooled)?;
        let (sigma, sigma_cache) = self.sigma_head.forward(&pooled)?;
        Ok((
            mu,
            sigma,
            EncoderCache {
                frames: caches,
                mu: mu_cache,
                sigma: sigma_cache,
            },
        ))
    }

    /// Adds encoder parameter gradients for upstream `(∂L/∂μ, ∂L/∂σ)` into `grads`.
    /// `d_sigma` may be empty when σ does not enter the loss.
    pub fn encoder_backward(
        &self,
        cache: &EncoderCache<T>,
        d_mu: &[T],
        d_sigma: &[T],
        grads: &mut ModelParams<T>,
    ) -> Result<()> {
        let mut d_pooled =
            self.mu_head
                .backward_into(&cache.mu, d_mu, &mut grads.mu_head.weights, &mut grads.mu_head.bias)?;
        if !d_sigma.is_empty() {
            let ds = self.sigma_head.backward_into(
                &cache.sigma,
                d_sigma,
                &mut grads.sigma_head.weights,
                &mut grads.sigma_head.bias,
            )?;
            for (a, b) in d_pooled.iter_mut().zip(ds) {
                *a += b;
            }
        }
        let n = T::from_usize(cache.frames.len()).unwrap();
        d_pooled.iter_mut().for_each(|g| *g /= n);
        for c in &cache.frames {
            self.encoder_frames
                .backward_into(c, &d_pooled, &mut grads.encoder_frames)?;
        }
        Ok(())
    }

    fn decoder_input(&self, z: &[T], content_id: usize) -> Result<Vec<T>> {
        if z.len() != self.dims.latent_dim {
            return Err(Error::shape("decode", (z.len(), 1), (self.dims.latent_dim, 1)));
        }
        if content_id >= self.dims.n_contents {
            return Err(Error::domain(format!(
                "content id {content_id} outside vocabulary of {}",
                self.dims.n_contents
            )));
        }
        let mut input = Vec::with_capacity(z.len() + self.dims.n_contents);
        input.extend_from_slice(z);
        input.extend((0..self.dims.n_contents).map(|c| if c == content_id { T::one() } else { T::zero() }));
        Ok(input)
    }

    /// Decodes a `T × F` frame matrix from a speaker latent and a content id.
    pub fn decode(&self, z: &[T], content_id: usize) -> Result<Matrix<T>> {
        let out = self.decoder.apply(&self.decoder_input(z, content_id)?)?;
        Matrix::new(self.dims.frames, self.dims.feature_dim, out)
    }

    pub fn decode_with_cache(&self, z: &[T], content_id: usize) -> Result<(Vec<T>, DecoderCache<T>)> {
        let (out, mlp) = self.decoder.forward(&self.decoder_input(z, content_id)?)?;
        Ok((out, DecoderCache { mlp }))
    }

    /// Adds decoder gradients into `grads` and returns `∂L/∂z`.
    pub fn decoder_backward(&self, cache: &DecoderCache<T>, d_out: &[T], grads: &mut ModelParams<T>) -> Result<Vec<T>> {
        let mut d_in = self.decoder.backward_into(&cache.mlp, d_out, &mut grads.decoder)?;
        d_in.truncate(self.dims.latent_dim);
        Ok(d_in)
    }

    pub fn table_row_index(&self, speaker_id: u32) -> Result<usize> {
        self.table_speakers.binary_search(&speaker_id).map_err(|_| {
            Error::Lookup(format!(
                "speaker {speaker_id} has no lookup embedding (not a training speaker)"
            ))
        })
    }

    /// The baseline's embedding for a training speaker.
    pub fn baseline_embed(&self, speaker_id: u32) -> Result<Vec<T>> {
        Ok(self.baseline_table.row(self.table_row_index(speaker_id)?).to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let layer = |l: &DenseLayer<T>| DenseLayer {
            weights: l.weights.cast(),
            bias: l.bias.iter().map(|&b| U::from(b).unwrap()).collect(),
            activation: l.activation,
        };
        let mlp = |m: &Mlp<T>| Mlp {
            layers: m.layers.iter().map(layer).collect(),
        };
        ModelParams {
            dims: self.dims.clone(),
            encoder_frames: mlp(&self.encoder_frames),
            mu_head: layer(&self.mu_head),
            sigma_head: layer(&self.sigma_head),
            decoder: mlp(&self.decoder),
            baseline_table: self.baseline_table.cast(),
            table_speakers: self.table_speakers.clone(),
        }
    }
}
