use std::path::Path;

use ndarray::ArrayView2;

use crate::encoder::LinearEncoder;
use crate::error::{dim_err, Error, Result};
use crate::l2o::{self, DecodeOptions, DecodeOutput, ParamNet, Policy, Prox};
use crate::ndtensor::{load_checkpoint, save_checkpoint, Bound, ParamStore, Tape, Tensor};
use crate::transforms::{SparseTransform, TransformConfig};

const NA_KEY: &str = "meta.na";
const NT_KEY: &str = "meta.nt";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub na: usize,
    pub nt: usize,
    /// Codeword length.
    pub m: usize,
    /// `None` thresholds the iterate directly.
    pub transform: Option<TransformConfig>,
    pub hidden: usize,
}

impl ModelConfig {
    /// 8x8 truncated channel, compression 1/4, learned transform.
    pub fn desk() -> Self {
        Self {
            na: 8,
            nt: 8,
            m: 32,
            transform: Some(TransformConfig::desk(8)),
            hidden: l2o::DEFAULT_HIDDEN,
        }
    }

    pub fn n(&self) -> usize {
        2 * self.na * self.nt
    }
}

/// Encoder, optional sparse transform and parameter network.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiModel {
    pub encoder: LinearEncoder,
    pub transform: Option<SparseTransform>,
    pub net: ParamNet,
    na: usize,
    nt: usize,
}

/// A model's parameters bound to one tape.
pub struct ModelBound<'t> {
    pub encoder: Bound<'t>,
    pub transform: Option<Bound<'t>>,
    pub net: Bound<'t>,
}

impl CsiModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if let Some(t) = &cfg.transform {
            if t.nt != cfg.nt {
                return Err(dim_err!("transform built for nt = {}, model has {}", t.nt, cfg.nt));
            }
        }
        Ok(Self {
            encoder: LinearEncoder::init_kaiming(cfg.m, cfg.n(), seed)?,
            transform: cfg
                .transform
                .map(|t| SparseTransform::init(t, seed.wrapping_add(1000)))
                .transpose()?,
            net: ParamNet::init(cfg.hidden, seed.wrapping_add(2000))?,
            na: cfg.na,
            nt: cfg.nt,
        })
    }

    pub fn na(&self) -> usize {
        self.na
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn n(&self) -> usize {
        2 * self.na * self.nt
    }

    pub fn m(&self) -> usize {
        self.encoder.codeword_len()
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            na: self.na,
            nt: self.nt,
            m: self.m(),
            transform: self.transform.as_ref().map(|t| *t.config()),
            hidden: self.net.hidden(),
        }
    }

    pub fn prox(&self) -> Prox<'_> {
        match &self.transform {
            Some(t) => Prox::Learned(t),
            None => Prox::Identity,
        }
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.transform.as_ref().map_or(0, SparseTransform::param_count)
            + self.net.param_count()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> ModelBound<'t> {
        ModelBound {
            encoder: self.encoder.params().bind(tape),
            transform: self.transform.as_ref().map(|t| t.params().bind(tape)),
            net: self.net.params().bind(tape),
        }
    }

    pub fn accumulate(&mut self, bound: &ModelBound<'_>, grads: &crate::ndtensor::Gradients) -> Result<()> {
        self.encoder.params_mut().accumulate(&bound.encoder, grads)?;
        if let (Some(t), Some(b)) = (self.transform.as_mut(), bound.transform.as_ref()) {
            t.params_mut().accumulate(b, grads)?;
        }
        self.net.params_mut().accumulate(&bound.net, grads)
    }

    /// Every tensor in a fixed order (encoder, transform, network).
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.encoder
            .params_mut()
            .tensors_mut()
            .chain(self.transform.iter_mut().flat_map(|t| t.params_mut().tensors_mut()))
            .chain(self.net.params_mut().tensors_mut())
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().for_each(Tensor::zero_grad);
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = self.encoder.params().clone();
        if let Some(t) = &self.transform {
            store.extend(t.params().clone());
        }
        store.extend(self.net.params().clone());
        store.insert(NA_KEY, Tensor::new(vec![1], vec![self.na as f64]).expect("one value"));
        store.insert(NT_KEY, Tensor::new(vec![1], vec![self.nt as f64]).expect("one value"));
        store
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let na = store.get(NA_KEY)?.item()? as usize;
        let nt = store.get(NT_KEY)?.item()? as usize;
        let encoder = LinearEncoder::from_store(store)?;
        if encoder.input_len() != 2 * na * nt {
            return Err(Error::Format(format!(
                "encoder width {} does not match {na}x{nt} channel",
                encoder.input_len()
            )));
        }
        let transform = if store.contains("ft.layer0.W") {
            let t = SparseTransform::from_store(store)?;
            if t.config().nt != nt {
                return Err(Error::Format("transform width does not match the channel".into()));
            }
            Some(t)
        } else {
            None
        };
        Ok(Self {
            encoder,
            transform,
            net: ParamNet::from_store(store)?,
            na,
            nt,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.to_store())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&load_checkpoint(path)?)
    }

    pub fn weight_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.m(), self.n()), self.encoder.weight().data())
            .expect("encoder weight is m x n")
    }

    /// Codewords for `batch x n` channels, row-major.
    pub fn encode_batch(&self, h: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        if h.len() % n != 0 {
            return Err(dim_err!("{} values do not split into channels of {n}", h.len()));
        }
        let mut out = Vec::with_capacity(h.len() / n * self.m());
        for row in h.chunks(n) {
            out.extend(self.encoder.encode(row)?.values);
        }
        Ok(out)
    }

    /// Decodes `batch x M` codewords with the learned network.
    pub fn decode_batch(&self, s: &[f64], iters: usize, seed: u64) -> Result<DecodeOutput> {
        l2o::decode(
            Policy::Learned(&self.net),
            self.prox(),
            self.weight_view(),
            s,
            DecodeOptions { iters, seed, lambda: 0.0 },
        )
    }

    /// Same network and transform with the encoder resized to `m` rows.
    pub fn with_codeword_len(&self, m: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            encoder: self.encoder.resized(m, seed)?,
            ..self.clone()
        })
    }
}
