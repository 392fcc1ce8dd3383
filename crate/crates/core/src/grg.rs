//! Global representation guidance: embed the predicted map and fuse the
//! embedding into every query before the next decoder layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{apply_mlp, MlpSpec, ParamStore, Tensor};

pub const DEFAULT_WEAKEN: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrgSpec {
    /// `[C*H*W, ..., d_g]`
    pub encoder: MlpSpec,
    /// `[C_q + d_g, ..., C_q]`
    pub fusion: MlpSpec,
    /// Gradient weakening coefficient applied to the fused query.
    pub weaken: f64,
}

impl GrgSpec {
    pub fn new(map_len: usize, d_g: usize, query_dim: usize) -> Self {
        GrgSpec {
            encoder: MlpSpec::linear(map_len, d_g),
            fusion: MlpSpec { widths: vec![query_dim + d_g, query_dim, query_dim], hidden_activation: Default::default() },
            weaken: DEFAULT_WEAKEN,
        }
    }

    pub fn d_g(&self) -> usize {
        self.encoder.d_out()
    }

    pub fn query_dim(&self) -> usize {
        self.fusion.d_out()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        if self.fusion.d_in() != self.query_dim() + self.d_g() {
            return Err(Error::invalid(format!(
                "fusion input {} must equal query width {} + embedding width {}",
                self.fusion.d_in(),
                self.query_dim(),
                self.d_g()
            )));
        }
        if !(0.0..=1.0).contains(&self.weaken) {
            return Err(Error::invalid(format!("weakening coefficient {} outside [0, 1]", self.weaken)));
        }
        Ok(())
    }

    pub fn prefix(layer: usize) -> String {
        format!("grg.{layer}")
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, seed: u64) {
        self.encoder.init(store, &format!("{prefix}.enc"), seed);
        self.fusion.init(store, &format!("{prefix}.fuse"), seed);
    }
}

/// Flattens the post-sigmoid map row-major and encodes it: `[C, H, W] -> [d_g]`.
pub fn encode_global<'g>(store: &ParamStore, prefix: &str, spec: &GrgSpec, m_pred: Tensor<'g>) -> Result<Tensor<'g>> {
    if m_pred.numel() != spec.encoder.d_in() {
        return Err(Error::shape("encode_global", &[spec.encoder.d_in()], &m_pred.shape()));
    }
    let flat = m_pred.reshape(&[1, m_pred.numel()])?;
    Ok(apply_mlp(store, &format!("{prefix}.enc"), &spec.encoder, flat)?.flatten())
}

/// Concatenates the shared embedding to each query, fuses, and weakens the
/// result. Accepts `[C_q]` or `[n, C_q]` and returns the same shape.
pub fn inject_global<'g>(
    store: &ParamStore,
    prefix: &str,
    spec: &GrgSpec,
    q: Tensor<'g>,
    f_global: Tensor<'g>,
) -> Result<Tensor<'g>> {
    let s = q.shape();
    let cq = spec.query_dim();
    let rows = match s.as_slice() {
        [c] if *c == cq => 1,
        [n, c] if *c == cq => *n,
        _ => return Err(Error::shape("inject_global", &[cq], &s)),
    };
    if f_global.numel() != spec.d_g() {
        return Err(Error::shape("inject_global", &[spec.d_g()], &f_global.shape()));
    }
    let q2 = q.reshape(&[rows, cq])?;
    let ctx = f_global.flatten().repeat_rows(rows);
    let fused = apply_mlp(store, &format!("{prefix}.fuse"), &spec.fusion, Tensor::concat_cols(&[q2, ctx])?)?;
    fused.weaken(spec.weaken)?.reshape(&s)
}

/// Encode then inject; `logits` are the pre-sigmoid global map.
pub fn grg_forward<'g>(store: &ParamStore, prefix: &str, spec: &GrgSpec, q: Tensor<'g>, logits: Tensor<'g>) -> Result<Tensor<'g>> {
    let f = encode_global(store, prefix, spec, logits.sigmoid())?;
    inject_global(store, prefix, spec, q, f)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::grl::{grl_forward, GrlSpec};
    use crate::ndgrad::gradcheck::random_vec;
    use crate::ndgrad::Graph;

    #[test]
    fn default_embedding_width() {
        let spec = GrgSpec::new(3 * 64 * 32, 256, 64);
        spec.validate().unwrap();
        let mut store = ParamStore::new();
        spec.init(&mut store, "grg.0", 0);
        let g = Graph::new();
        let m = g.leaf(vec![0.5; 3 * 64 * 32], &[3, 64, 32], false);
        assert_eq!(encode_global(&store, "grg.0", &spec, m).unwrap().shape(), vec![256]);
        let wrong = g.leaf(vec![0.5; 10], &[10], false);
        assert!(encode_global(&store, "grg.0", &spec, wrong).is_err());
    }

    #[test]
    fn zero_encoder_returns_bias() {
        let spec = GrgSpec::new(12, 4, 3);
        let mut store = ParamStore::new();
        spec.init(&mut store, "e", 1);
        store.set("e.enc.0.weight", vec![0.0; 48]).unwrap();
        store.set("e.enc.0.bias", vec![1.0, -2.0, 0.5, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::new();
        let m = g.leaf(random_vec(&mut rng, 12), &[3, 2, 2], false);
        assert_eq!(encode_global(&store, "e", &spec, m).unwrap().to_vec(), vec![1.0, -2.0, 0.5, 0.0]);
    }

    #[test]
    fn distinct_maps_give_distinct_embeddings() {
        let spec = GrgSpec::new(3 * 16 * 8, 32, 8);
        for seed in 0..20 {
            let mut store = ParamStore::new();
            spec.init(&mut store, "e", seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Graph::new();
            let a = g.leaf(random_vec(&mut rng, 384), &[3, 16, 8], false).sigmoid();
            let b = g.leaf(random_vec(&mut rng, 384), &[3, 16, 8], false).sigmoid();
            let fa = encode_global(&store, "e", &spec, a).unwrap().to_vec();
            let fb = encode_global(&store, "e", &spec, b).unwrap().to_vec();
            assert_ne!(fa, fb, "seed {seed}");
        }
    }

    fn linear_fusion(cq: usize, dg: usize, keep_query: bool) -> (GrgSpec, ParamStore) {
        let spec = GrgSpec { encoder: MlpSpec::linear(6, dg), fusion: MlpSpec::linear(cq + dg, cq), weaken: 0.8 };
        let mut store = ParamStore::new();
        spec.init(&mut store, "f", 2);
        let mut w = vec![0.0; (cq + dg) * cq];
        for i in 0..cq {
            if keep_query {
                w[i * cq + i] = 1.0;
            } else {
                for j in 0..dg {
                    w[(cq + j) * cq + i] = 0.25 * (i + j + 1) as f64;
                }
            }
        }
        store.set("f.fuse.0.weight", w).unwrap();
        store.set("f.fuse.0.bias", vec![0.0; cq]).unwrap();
        (spec, store)
    }

    #[test]
    fn identity_and_query_blind_fusion() {
        let (spec, store) = linear_fusion(3, 2, true);
        let g = Graph::new();
        let q = g.leaf(vec![0.3, -1.2, 4.0, 2.0, 0.0, -0.5], &[2, 3], false);
        let f = g.leaf(vec![7.0, -9.0], &[2], false);
        assert_eq!(inject_global(&store, "f", &spec, q, f).unwrap().to_vec(), q.to_vec());

        // parameters are cached per graph
        let (spec, store) = linear_fusion(3, 2, false);
        let g = Graph::new();
        let q = g.leaf(vec![0.3, -1.2, 4.0, 2.0, 0.0, -0.5], &[2, 3], false);
        let f = g.leaf(vec![7.0, -9.0], &[2], false);
        let out = inject_global(&store, "f", &spec, q, f).unwrap().to_vec();
        assert_eq!(&out[..3], &out[3..]);
        let single = g.leaf(vec![9.0, 9.0, 9.0], &[3], false);
        assert_eq!(inject_global(&store, "f", &spec, single, f).unwrap().to_vec(), out[..3].to_vec());
        let wrong = g.leaf(vec![0.0; 4], &[4], false);
        assert!(inject_global(&store, "f", &spec, wrong, f).is_err());
    }

    #[test]
    fn weakening_scales_gradient_and_keeps_forward() {
        let spec0 = GrgSpec::new(6, 4, 3);
        let mut store = ParamStore::new();
        spec0.init(&mut store, "w", 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let qv = random_vec(&mut rng, 6);
        let fv = random_vec(&mut rng, 4);
        let upstream = random_vec(&mut rng, 6);
        let run = |c: f64| {
            let spec = GrgSpec { weaken: c, ..spec0.clone() };
            let g = Graph::new();
            let q = g.leaf(qv.clone(), &[2, 3], true);
            let f = g.leaf(fv.clone(), &[4], true);
            let out = inject_global(&store, "w", &spec, q, f).unwrap();
            let loss = out.mul(g.constant(upstream.clone(), &[2, 3])).unwrap().sum();
            g.backward(loss).unwrap();
            (out.to_vec(), q.grad(), f.grad())
        };
        let (o0, gq0, gf0) = run(0.0);
        let (o8, gq8, gf8) = run(0.8);
        assert_eq!(o0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), o8.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        for (a, b) in gq0.iter().chain(&gf0).zip(gq8.iter().chain(&gf8)) {
            assert!((b - 0.2 * a).abs() <= 1e-13 * a.abs().max(1e-3), "{b} vs 0.2*{a}");
        }
    }

    #[test]
    fn every_query_sees_every_other_query() {
        let grl = GrlSpec { n: 4, query_dim: 6, d_grl: 8, h: 4, w: 2, phi_hidden: 4, classes: 3, out_h: 8, out_w: 4 };
        let grg = GrgSpec::new(3 * 8 * 4, 5, 6);
        let mut store = ParamStore::new();
        grl.init(&mut store, "grl.0", 3);
        grg.init(&mut store, "grg.0", 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Graph::new();
        let q = g.leaf(random_vec(&mut rng, 24), &[4, 6], true);
        let logits = grl_forward(&store, "grl.0", &grl, q).unwrap();
        let fused = grg_forward(&store, "grg.0", &grg, q, logits).unwrap();
        // d fused[0] / d q[j] for j != 0
        let pick = fused.index_rows(&[0]).unwrap().sum();
        g.backward(pick).unwrap();
        let grad = q.grad();
        let cross = grad[6..].iter().any(|v| v.abs() > 1e-12);
        assert!(cross);
    }
}
