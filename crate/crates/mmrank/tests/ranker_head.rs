//! Ranker head: plain-float oracle for the MLP, clamp behavior, and a
//! gradient check covering the id tables.

use mmrank::bind::BoundParams;
use mmrank::config::RankerSettings;
use mmrank::ranker::{bce_with_logit, id_embeddings, init_ranker, ranker_logit};
use mmrank_core::gradcheck::finite_difference_check;
use mmrank_core::rng::stream_rng;
use mmrank_core::{GradBuf, ParamStore, Tape, Tensor};
use rand::Rng;

const FUSED: usize = 12; // 8 id dims + 4 extras
const N_USERS: usize = 5;
const N_DOCS: usize = 6;

fn toy_cfg() -> RankerSettings {
    RankerSettings {
        user_id_dim: 3,
        doc_id_dim: 3,
        query_id_dim: 2,
        qid_buckets: 4,
        hidden: vec![6, 4],
        logit_clamp: 30.0,
    }
}

fn toy_store(cfg: &RankerSettings, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = stream_rng(seed, 1, 0);
    init_ranker(&mut store, &mut rng, cfg, FUSED, N_USERS, N_DOCS);
    store
}

fn gelu(x: f64) -> f64 {
    let c = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (c * (x + 0.044_715 * x * x * x)).tanh())
}

fn oracle_logit(store: &ParamStore, cfg: &RankerSettings, fused: &[f64]) -> f64 {
    let matvec_t = |w: &Tensor, x: &[f64]| -> Vec<f64> {
        let (r, c) = (w.rows(), w.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += w.values()[i * c + j] * x[i];
            }
        }
        out
    };
    let mut x = fused.to_vec();
    for i in 0..cfg.hidden.len() {
        let w = store.by_name(&format!("rank.h{i}.w"));
        let b = store.by_name(&format!("rank.h{i}.b"));
        x = matvec_t(w, &x)
            .iter()
            .zip(b.values())
            .map(|(v, bb)| gelu(v + bb))
            .collect();
    }
    let w = store.by_name("rank.out.w");
    let b = store.by_name("rank.out.b");
    let z = matvec_t(w, &x)[0] + b.values()[0];
    z.clamp(-cfg.logit_clamp, cfg.logit_clamp)
}

#[test]
fn logit_matches_plain_float_oracle() {
    let cfg = toy_cfg();
    let store = toy_store(&cfg, 3);
    let mut rng = stream_rng(5, 2, 0);
    for _ in 0..10 {
        let fused: Vec<f64> = (0..FUSED).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let mut bound = BoundParams::new(&store);
        let f = tape.input(Tensor::vector(fused.clone()));
        let z = ranker_logit(&mut tape, &mut bound, &cfg, f);
        let got = tape.value(z).item();
        let want = oracle_logit(&store, &cfg, &fused);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn clamp_pins_extreme_logits() {
    let cfg = RankerSettings {
        logit_clamp: 0.01, // tiny clamp so any input saturates
        ..toy_cfg()
    };
    let store = toy_store(&cfg, 4);
    let mut tape = Tape::new();
    let mut bound = BoundParams::new(&store);
    let f = tape.input(Tensor::vector(vec![5.0; FUSED]));
    let z = ranker_logit(&mut tape, &mut bound, &cfg, f);
    assert_eq!(tape.value(z).item().abs(), 0.01);
}

#[test]
fn head_gradients_match_finite_differences() {
    let cfg = toy_cfg();
    let mut store = toy_store(&cfg, 6);
    let mut rng = stream_rng(7, 2, 0);
    let extra: Vec<f64> = (0..FUSED - cfg.user_id_dim - cfg.doc_id_dim - cfg.query_id_dim)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    assert!(!extra.is_empty());
    let (uid, doc, qid) = (2u64, 4u64, 11u64);

    let run = |store: &ParamStore| -> (f64, GradBuf) {
        let mut tape = Tape::new();
        let mut bound = BoundParams::new(store);
        let (ue, de, qe) = id_embeddings(&mut tape, &mut bound, &cfg, uid, doc, qid);
        let rest = tape.input(Tensor::vector(extra.clone()));
        let fused = tape.concat_vec(&[ue, de, qe, rest]);
        let z = ranker_logit(&mut tape, &mut bound, &cfg, fused);
        let loss = bce_with_logit(&mut tape, z, 1);
        let grads = tape.backward_scalar(loss);
        let mut buf = GradBuf::zeros_like(store);
        bound.accumulate_into(&grads, &mut buf);
        (tape.value(loss).item(), buf)
    };

    let (_, buf) = run(&store);
    let report = finite_difference_check(&mut store, &buf, |s| run(s).0, 1e-5).unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "worst {} rel {}",
        report.worst_param,
        report.max_rel_err
    );
    // Only the looked-up id rows carry gradient.
    let ud = cfg.user_id_dim;
    let user = buf.get(store.id("rank.user"));
    assert!(user[2 * ud..3 * ud].iter().any(|&g| g != 0.0));
    assert!(user[..2 * ud].iter().all(|&g| g == 0.0));
}
