use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{positional_encoding, distill_loss, Attention, Distill, FeedForward, Linear, Norm};
use crate::activation::{ActivationMode, ScalarActivation};
use crate::data::Window;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const PARAMS_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone)]
struct EncLayer {
    attn: Attention,
    norm1: Norm,
    ff: FeedForward,
    norm2: Norm,
}

#[derive(Debug, Clone)]
struct DecLayer {
    self_attn: Attention,
    norm1: Norm,
    cross_attn: Attention,
    norm2: Norm,
    ff: FeedForward,
    norm3: Norm,
}

#[derive(Debug, Clone)]
struct Layout {
    enc_embed: Linear,
    dec_embed: Linear,
    enc: Vec<EncLayer>,
    distill: Vec<Distill>,
    dec: Vec<DecLayer>,
    head: Linear,
}

impl Layout {
    fn init(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, d, dff) = (cfg.n_features, cfg.d_model, cfg.d_ff);
        let enc_embed = Linear::init(store, &mut rng, "enc.embed", f, d);
        let dec_embed = Linear::init(store, &mut rng, "dec.embed", f, d);
        let mut enc = Vec::new();
        let mut distill = Vec::new();
        for l in 0..cfg.n_enc_layers {
            let p = format!("enc.{l}");
            enc.push(EncLayer {
                attn: Attention::init(store, &mut rng, &format!("{p}.attn"), d),
                norm1: Norm::init(store, &format!("{p}.norm1"), d),
                ff: FeedForward::init(store, &mut rng, &format!("{p}.ff"), d, dff),
                norm2: Norm::init(store, &format!("{p}.norm2"), d),
            });
            if l + 1 < cfg.n_enc_layers && cfg.distill {
                distill.push(Distill::init(store, &mut rng, &format!("enc.distill.{l}"), d));
            }
        }
        let dec = (0..cfg.n_dec_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecLayer {
                    self_attn: Attention::init(store, &mut rng, &format!("{p}.self_attn"), d),
                    norm1: Norm::init(store, &format!("{p}.norm1"), d),
                    cross_attn: Attention::init(store, &mut rng, &format!("{p}.cross_attn"), d),
                    norm2: Norm::init(store, &format!("{p}.norm2"), d),
                    ff: FeedForward::init(store, &mut rng, &format!("{p}.ff"), d, dff),
                    norm3: Norm::init(store, &format!("{p}.norm3"), d),
                }
            })
            .collect();
        let head = Linear::init(store, &mut rng, "head", d, cfg.n_targets);
        Layout {
            enc_embed,
            dec_embed,
            enc,
            distill,
            dec,
            head,
        }
    }
}

/// Values captured during one forward pass, for inspection and tests.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// Encoder self-attention weights, `[layer][head]`.
    pub enc_attention: Vec<Vec<Tensor>>,
    /// Sequence length entering each encoder layer.
    pub enc_lengths: Vec<usize>,
    /// Decoder masked self-attention output of each layer, before the residual and norm.
    pub dec_self_attention: Vec<Tensor>,
    pub cross_attention: Vec<Vec<Tensor>>,
}

/// Graph handles of an encoder pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub memory: Var,
    /// `(input, distilled)` of each distill layer.
    pub distilled: Vec<(Var, Var)>,
}

/// Encoder-decoder forecaster with fixed sinusoidal positions, optional
/// distillation between encoder layers and a single-pass decoder.
#[derive(Debug)]
pub struct Cotn {
    cfg: ModelConfig,
    store: ParamStore,
    layout: Layout,
    act: Arc<dyn ScalarActivation>,
    decoder_passes: AtomicUsize,
}

impl Clone for Cotn {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            store: self.store.clone(),
            layout: self.layout.clone(),
            act: Arc::clone(&self.act),
            decoder_passes: AtomicUsize::new(self.decoder_passes.load(Ordering::Relaxed)),
        }
    }
}

impl Cotn {
    /// Parameters drawn from `seed`; the draw order does not depend on the activation mode.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let layout = Layout::init(&cfg, &mut store, seed);
        let act = cfg.activation.handle()?;
        Ok(Self {
            cfg,
            store,
            layout,
            act,
            decoder_passes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn activation_mode(&self) -> ActivationMode {
        self.cfg.activation
    }

    /// Replaces the feed-forward activation; parameters are untouched.
    pub fn set_activation(&mut self, mode: ActivationMode) -> Result<()> {
        self.act = mode.handle()?;
        self.cfg.activation = mode;
        Ok(())
    }

    /// Number of decoder passes run so far.
    pub fn decoder_passes(&self) -> usize {
        self.decoder_passes.load(Ordering::Relaxed)
    }

    fn check_enc(&self, enc: &Tensor) -> Result<()> {
        let want = [self.cfg.enc_len, self.cfg.n_features];
        if enc.shape() != want {
            return Err(Error::shape("encode", format!("expected {want:?}, got {:?}", enc.shape())));
        }
        Ok(())
    }

    fn check_dec(&self, dec: &Tensor) -> Result<()> {
        let (lab, h, f) = (self.cfg.label_len, self.cfg.horizon, self.cfg.n_features);
        if dec.shape().len() != 2 || dec.cols() != f {
            return Err(Error::shape("decode", format!("expected [_, {f}], got {:?}", dec.shape())));
        }
        if dec.rows() != lab + h {
            return Err(Error::Argument(format!(
                "decoder input needs {lab} context rows plus {h} placeholder rows, got {} rows",
                dec.rows()
            )));
        }
        if dec.data()[lab * f..].iter().any(|&v| v != 0.0) {
            return Err(Error::Argument("the last horizon rows of the decoder input must be zero placeholders".into()));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, store: &ParamStore, lin: &Linear, x: &Tensor) -> Result<Var> {
        let xv = g.constant(x.clone());
        let e = lin.forward(g, store, xv)?;
        let pe = g.constant(positional_encoding(x.rows(), self.cfg.d_model));
        g.add(e, pe)
    }

    /// Encoder pass on `g` using the parameter values in `store`.
    pub fn encode_on(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        enc: &Tensor,
        mut trace: Option<&mut Trace>,
    ) -> Result<Encoded> {
        self.check_enc(enc)?;
        let mut h = self.embed(g, store, &self.layout.enc_embed, enc)?;
        let mut distilled = Vec::new();
        for (l, layer) in self.layout.enc.iter().enumerate() {
            if let Some(t) = trace.as_deref_mut() {
                t.enc_lengths.push(g.value(h).rows());
            }
            let a = layer.attn.forward(g, store, h, h, self.cfg.n_heads, false)?;
            if let Some(t) = trace.as_deref_mut() {
                t.enc_attention.push(a.weights.iter().map(|&w| g.value(w).clone()).collect());
            }
            let r = g.add(h, a.out)?;
            h = layer.norm1.forward(g, store, r)?;
            let f = layer.ff.forward(g, store, h, &self.act)?;
            let r = g.add(h, f)?;
            h = layer.norm2.forward(g, store, r)?;
            if let Some(d) = self.layout.distill.get(l) {
                let out = d.forward(g, store, h)?;
                distilled.push((h, out));
                h = out;
            }
        }
        Ok(Encoded { memory: h, distilled })
    }

    /// Decoder pass: all `horizon` outputs come from this single call.
    pub fn decode_on(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        memory: Var,
        dec: &Tensor,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        self.check_dec(dec)?;
        if g.value(memory).cols() != self.cfg.d_model {
            return Err(Error::shape(
                "decode",
                format!("memory width {} != d_model {}", g.value(memory).cols(), self.cfg.d_model),
            ));
        }
        self.decoder_passes.fetch_add(1, Ordering::Relaxed);
        let mut h = self.embed(g, store, &self.layout.dec_embed, dec)?;
        for layer in &self.layout.dec {
            let a = layer.self_attn.forward(g, store, h, h, self.cfg.n_heads, true)?;
            if let Some(t) = trace.as_deref_mut() {
                t.dec_self_attention.push(g.value(a.out).clone());
            }
            let r = g.add(h, a.out)?;
            h = layer.norm1.forward(g, store, r)?;
            let c = layer.cross_attn.forward(g, store, h, memory, self.cfg.n_heads, false)?;
            if let Some(t) = trace.as_deref_mut() {
                t.cross_attention.push(c.weights.iter().map(|&w| g.value(w).clone()).collect());
            }
            let r = g.add(h, c.out)?;
            h = layer.norm2.forward(g, store, r)?;
            let f = layer.ff.forward(g, store, h, &self.act)?;
            let r = g.add(h, f)?;
            h = layer.norm3.forward(g, store, r)?;
        }
        let y = self.layout.head.forward(g, store, h)?;
        g.slice_rows(y, self.cfg.label_len, self.cfg.horizon)
    }

    /// Averaged distillation loss of an encoder pass, if it distilled at all.
    pub fn distill_loss_on(&self, g: &mut Graph, enc: &Encoded) -> Result<Option<Var>> {
        if enc.distilled.is_empty() {
            return Ok(None);
        }
        let mut total = None;
        for &(x, d) in &enc.distilled {
            let lk = g.value(x).rows();
            let x_hat = g.repeat_rows(d, 2, lk)?;
            let l = distill_loss(g, x, x_hat)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        Ok(total.map(|t| g.scale(t, 1.0 / enc.distilled.len() as f64)))
    }

    /// Forecast `[horizon × n_targets]` and the distillation loss.
    pub fn forward_on(&self, store: &ParamStore, g: &mut Graph, enc: &Tensor, dec: &Tensor) -> Result<(Var, Option<Var>)> {
        let e = self.encode_on(store, g, enc, None)?;
        let y = self.decode_on(store, g, e.memory, dec, None)?;
        let dl = self.distill_loss_on(g, &e)?;
        Ok((y, dl))
    }

    /// `Σ w_b (w_forecast · mse_b + w_distill · distill_b) / Σ w_b`, summed in slice order.
    ///
    /// With `per_sample`, the unweighted objective of every window is appended to it.
    pub fn loss_on(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        windows: &[&Window],
        w_forecast: f64,
        w_distill: f64,
        mut per_sample: Option<&mut Vec<f64>>,
    ) -> Result<Var> {
        if windows.is_empty() {
            return Err(Error::Argument("loss over an empty batch".into()));
        }
        let wsum: f64 = windows.iter().map(|w| w.weight).sum();
        if !(wsum > 0.0) {
            return Err(Error::Argument("sample weights sum to zero".into()));
        }
        let mut total: Option<Var> = None;
        for w in windows {
            let (y, dl) = self.forward_on(store, g, &w.enc, &w.dec)?;
            if w.target.shape() != g.value(y).shape() {
                return Err(Error::shape(
                    "loss",
                    format!("target {:?} vs forecast {:?}", w.target.shape(), g.value(y).shape()),
                ));
            }
            let t = g.constant(w.target.clone());
            let m = g.mse(y, t)?;
            let mut l = g.scale(m, w_forecast);
            if let (Some(dl), true) = (dl, w_distill != 0.0) {
                let d = g.scale(dl, w_distill);
                l = g.add(l, d)?;
            }
            if let Some(ps) = per_sample.as_deref_mut() {
                ps.push(g.value(l).item());
            }
            let l = g.scale(l, w.weight / wsum);
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        Ok(total.unwrap())
    }

    pub fn encode(&self, enc: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let e = self.encode_on(&self.store, &mut g, enc, None)?;
        Ok(g.value(e.memory).clone())
    }

    /// Decodes from a precomputed memory `[Lm × d_model]`.
    pub fn parallel_decode(&self, memory: &Tensor, dec: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = g.constant(memory.clone());
        let y = self.decode_on(&self.store, &mut g, m, dec, None)?;
        Ok(g.value(y).clone())
    }

    pub fn forecast(&self, enc: &Tensor, dec: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (y, _) = self.forward_on(&self.store, &mut g, enc, dec)?;
        Ok(g.value(y).clone())
    }

    /// Forecast plus the captured intermediate values.
    pub fn forecast_traced(&self, enc: &Tensor, dec: &Tensor) -> Result<(Tensor, Trace)> {
        let mut g = Graph::new();
        let mut trace = Trace::default();
        let e = self.encode_on(&self.store, &mut g, enc, Some(&mut trace))?;
        let y = self.decode_on(&self.store, &mut g, e.memory, dec, Some(&mut trace))?;
        Ok((g.value(y).clone(), trace))
    }

    /// Writes `params.bin`, its manifest and `config.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(PARAMS_FILE))?;
        let cpath = dir.join(CONFIG_FILE);
        fs::write(&cpath, self.cfg.to_text()).map_err(|e| Error::io(&cpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cpath = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
        let cfg = ModelConfig::from_text(&text)?;
        let mut model = Cotn::new(cfg, 0)?;
        let stored = ParamStore::load(&dir.join(PARAMS_FILE))?;
        model
            .store
            .copy_from(&stored)
            .map_err(|_| Error::Format("checkpoint parameters do not match its config".into()))?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_param_gradients, GradCheckOptions};
    use crate::tensor::xavier_uniform;

    fn small(distill: bool, n_enc: usize, l: usize, h: usize) -> ModelConfig {
        ModelConfig {
            n_features: 2,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: n_enc,
            n_dec_layers: 1,
            d_ff: 16,
            enc_len: l,
            label_len: l / 2,
            horizon: h,
            activation: ActivationMode::Gelu,
            distill,
            ..ModelConfig::default()
        }
    }

    fn inputs(cfg: &ModelConfig, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = xavier_uniform(&mut rng, &[cfg.enc_len, cfg.n_features], 1, 1);
        let mut dec = Tensor::zeros(&[cfg.dec_len(), cfg.n_features]);
        let ctx = cfg.label_len * cfg.n_features;
        dec.data_mut()[..ctx].copy_from_slice(&enc.data()[enc.numel() - ctx..]);
        (enc, dec)
    }

    #[test]
    fn memory_lengths_follow_distillation() {
        for (distill, n, l, want) in [(false, 2, 48, 48), (true, 3, 96, 24), (true, 2, 7, 4)] {
            let cfg = small(distill, n, l, 4);
            let m = Cotn::new(cfg.clone(), 1).unwrap();
            let (enc, _) = inputs(&cfg, 2);
            let mem = m.encode(&enc).unwrap();
            assert_eq!(mem.rows(), want);
            assert_eq!(cfg.memory_len(), want);
            assert!(mem.all_finite());
        }
    }

    #[test]
    fn forecast_shape_and_single_pass() {
        let cfg = small(true, 2, 16, 24);
        let m = Cotn::new(cfg.clone(), 3).unwrap();
        let (enc, dec) = inputs(&cfg, 4);
        let y = m.forecast(&enc, &dec).unwrap();
        assert_eq!(y.shape(), &[24, 1]);
        assert_eq!(m.decoder_passes(), 1);
    }

    #[test]
    fn cross_attention_is_live() {
        let cfg = small(false, 1, 12, 4);
        let m = Cotn::new(cfg.clone(), 5).unwrap();
        let (enc, dec) = inputs(&cfg, 6);
        let mem = m.encode(&enc).unwrap();
        let a = m.parallel_decode(&mem, &dec).unwrap();
        let b = m.parallel_decode(&Tensor::zeros(mem.shape()), &dec).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn rejects_bad_decoder_and_encoder_inputs() {
        let cfg = small(false, 1, 12, 4);
        let m = Cotn::new(cfg.clone(), 5).unwrap();
        let (enc, mut dec) = inputs(&cfg, 6);
        let last = dec.numel() - 1;
        dec.data_mut()[last] = 1.0;
        assert!(matches!(m.forecast(&enc, &dec), Err(Error::Argument(_))));
        let short = Tensor::zeros(&[cfg.label_len, cfg.n_features]);
        assert!(matches!(m.forecast(&enc, &short), Err(Error::Argument(_))));
        let bad_enc = Tensor::zeros(&[cfg.enc_len + 1, cfg.n_features]);
        assert!(matches!(m.encode(&bad_enc), Err(Error::Shape { .. })));
    }

    #[test]
    fn activation_swap_keeps_shapes_and_params() {
        let cfg = small(true, 2, 16, 8);
        let mut m = Cotn::new(cfg.clone(), 7).unwrap();
        let (enc, dec) = inputs(&cfg, 8);
        let before = m.params().clone();
        let y0 = m.forecast(&enc, &dec).unwrap();
        m.set_activation(ActivationMode::gated(1)).unwrap();
        assert!(m.params().bit_identical(&before));
        let y1 = m.forecast(&enc, &dec).unwrap();
        assert_eq!(y0.shape(), y1.shape());
        assert!(y0.max_abs_diff(&y1) > 0.0);
    }

    #[test]
    fn init_independent_of_activation() {
        let cfg = small(true, 2, 16, 8);
        let a = Cotn::new(cfg.clone(), 9).unwrap();
        let b = Cotn::new(
            ModelConfig {
                activation: ActivationMode::gated(4),
                ..cfg
            },
            9,
        )
        .unwrap();
        assert!(a.params().bit_identical(b.params()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(true, 2, 16, 8);
        let m = Cotn::new(cfg.clone(), 11).unwrap();
        m.save(dir.path()).unwrap();
        let back = Cotn::load(dir.path()).unwrap();
        assert!(back.params().bit_identical(m.params()));
        assert_eq!(back.config(), m.config());
        let (enc, dec) = inputs(&cfg, 12);
        assert_eq!(back.forecast(&enc, &dec).unwrap(), m.forecast(&enc, &dec).unwrap());
    }

    #[test]
    fn small_model_gradients() {
        let cfg = ModelConfig {
            d_model: 4,
            d_ff: 6,
            ..small(true, 2, 6, 2)
        };
        let m = Cotn::new(cfg.clone(), 13).unwrap();
        let (enc, dec) = inputs(&cfg, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w = Window {
            start: 0,
            enc,
            dec,
            target: xavier_uniform(&mut rng, &[2, 1], 1, 1),
            weight: 1.0,
        };
        let report = check_param_gradients(m.params(), &GradCheckOptions::default(), |s, g| {
            m.loss_on(s, g, &[&w], 1.0, 0.05, None)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        assert!(report.checked > report.excluded * 10);
    }
}
