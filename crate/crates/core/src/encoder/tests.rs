use super::*;
use crate::gradcheck;
use crate::optim::{AdamW, AdamWConfig};

fn small() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 4,
        n_heads: 2,
        d_ff: 12,
        max_len: 16,
        n_classes: 3,
        ..Default::default()
    }
}

fn seq() -> TokenSeq {
    TokenSeq::join(&[vec![3, 4, 5], vec![6, 7]], 0)
}

#[test]
fn join_marks_segments() {
    let s = seq();
    assert_eq!(s.ids, vec![3, 4, 5, 0, 6, 7]);
    assert_eq!(s.segs, vec![0, 0, 0, 0, 1, 1]);
    let e = TokenSeq::join(&[vec![], vec![6]], 0);
    assert_eq!(e.ids, vec![0, 6]);
    assert_eq!(e.segs, vec![0, 1]);
}

#[test]
fn full_truncation_is_identity() {
    let m = Model::<f64>::new(small(), &[], 1).unwrap();
    assert_eq!(m.encode(&seq(), Some(4)).unwrap(), m.encode(&seq(), None).unwrap());
    assert_ne!(m.encode(&seq(), Some(2)).unwrap(), m.encode(&seq(), None).unwrap());
    assert_ne!(m.encode(&seq(), Some(1)).unwrap(), m.encode(&seq(), None).unwrap());
}

#[test]
fn truncation_nests_in_full_pass() {
    let m = Model::<f64>::new(small(), &[], 2).unwrap();
    let mut g = Graph::new();
    let p = m.store.bind(&mut g, false);
    let batch = [seq(), TokenSeq::single(vec![9, 2])];
    let taps = m.encode_batch(&mut g, &p, &batch, &[1, 2, 3, 4], None).unwrap();
    for k in 1..=4 {
        for (r, s) in batch.iter().enumerate() {
            assert_eq!(g.value(taps[k - 1]).unwrap().row(r), m.encode(s, Some(k)).unwrap().as_slice());
        }
    }
}

#[test]
fn position_free_encoder_ignores_order() {
    let cfg = EncoderConfig { positional: false, ..small() };
    let m = Model::<f64>::new(cfg, &[], 3).unwrap();
    let a = m.encode(&TokenSeq::single(vec![5, 9, 2, 7]), None).unwrap();
    let b = m.encode(&TokenSeq::single(vec![7, 2, 5, 9]), None).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn zero_head_gives_zero_logits() {
    let mut m = Model::<f64>::new(small(), &[BranchId::Gra], 4).unwrap();
    for i in 0..m.store.len() {
        if m.store.name(i).starts_with("head.gra") {
            m.store.value_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let rep = m.encode(&seq(), None).unwrap();
    assert_eq!(m.head_forward(BranchId::Gra, &rep).unwrap(), vec![0.0; 3]);
    let z = m.head_forward(BranchId::Intact, &rep).unwrap();
    let mx = z.iter().cloned().fold(f64::MIN, f64::max);
    let s: f64 = z.iter().map(|v| (v - mx).exp()).sum();
    let p: f64 = z.iter().map(|v| (v - mx).exp() / s).sum();
    assert!((p - 1.0).abs() < 1e-12);
}

#[test]
fn head_errors() {
    let m = Model::<f64>::new(small(), &[BranchId::Sub(1)], 0).unwrap();
    assert!(m.head_forward(BranchId::Rep, &[0.0; 8]).is_err());
    assert!(m.head_forward(BranchId::Sub(1), &[0.0; 7]).is_err());
    assert!(matches!(m.encode(&TokenSeq::single(vec![]), None), Err(Error::EmptySequence)));
    assert!(matches!(
        m.encode(&TokenSeq::single(vec![12]), None),
        Err(Error::OutOfVocab { id: 12, .. })
    ));
    assert!(matches!(
        m.encode(&TokenSeq::single(vec![1; 17]), None),
        Err(Error::SequenceTooLong { len: 17, .. })
    ));
    assert!(m.encode(&seq(), Some(5)).is_err());
    assert!(m.encode(&seq(), Some(0)).is_err());
    assert!(Model::<f64>::new(small(), &[BranchId::Gra, BranchId::Gra], 0).is_err());
    assert!(Model::<f64>::new(EncoderConfig { n_heads: 3, ..small() }, &[], 0).is_err());
}

#[test]
fn head_param_count_matches_formula() {
    let cfg = small();
    let m = Model::<f64>::new(cfg.clone(), &[BranchId::Mod], 0).unwrap();
    let head: usize = (0..m.store.len())
        .filter(|&i| m.store.name(i).starts_with("head.mod"))
        .map(|i| m.store.value(i).numel())
        .sum();
    assert_eq!(head, cfg.head_param_count());
    assert_eq!(head, (8 * 8 + 8) + (8 * 3 + 3));
}

#[test]
fn encoder_is_shared_by_all_heads() {
    let mut m = Model::<f64>::new(small(), &[BranchId::Gra, BranchId::Half], 5).unwrap();
    let before: Vec<Vec<f64>> = [BranchId::Intact, BranchId::Gra, BranchId::Half]
        .iter()
        .map(|&b| m.head_forward(b, &m.encode(&seq(), None).unwrap()).unwrap())
        .collect();
    let i = m.store.position("layer0.ff1.w").unwrap();
    m.store.value_mut(i).data_mut()[0] += 0.5;
    for (k, &b) in [BranchId::Intact, BranchId::Gra, BranchId::Half].iter().enumerate() {
        let after = m.head_forward(b, &m.encode(&seq(), None).unwrap()).unwrap();
        assert_ne!(after, before[k]);
    }
}

#[test]
fn deterministic_and_strippable() {
    let m = Model::<f64>::new(small(), &[BranchId::Gra, BranchId::Rep], 6).unwrap();
    let c = vec![vec![3, 4], vec![5]];
    let z = m.intact_predict(&c).unwrap();
    assert_eq!(z, m.intact_predict(&c).unwrap());
    let mut s = m.clone();
    s.strip_branches();
    assert!(s.branches().is_empty());
    assert_eq!(s.store.len(), m.store.len() - 8);
    assert_eq!(s.intact_predict(&c).unwrap(), z);
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let l = Model::<f64>::load(dir.path()).unwrap();
    assert_eq!(l.intact_predict(&c).unwrap(), z);
    assert_eq!(l.branches(), vec![BranchId::Gra, BranchId::Rep]);
}

#[test]
fn batch_prediction_matches_single() {
    let m = Model::<f64>::new(small(), &[], 7).unwrap();
    let seqs: Vec<TokenSeq> = (1..8).map(|n| TokenSeq::single((1..=n).collect())).collect();
    let batch = m.predict_batch(&seqs, BranchId::Intact, None, 3).unwrap();
    for (s, z) in seqs.iter().zip(&batch) {
        let single = m.head_forward(BranchId::Intact, &m.encode(s, None).unwrap()).unwrap();
        for (a, b) in single.iter().zip(z) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn grad_check_through_encoder_and_head() {
    let cfg = EncoderConfig { n_layers: 2, d_model: 4, d_ff: 6, vocab_size: 8, ..small() };
    let m = Model::<f64>::new(cfg, &[BranchId::Mod], 8).unwrap();
    let params: Vec<Tensor<f64>> = (0..m.store.len()).map(|i| m.store.value(i).clone()).collect();
    let batch = [TokenSeq::join(&[vec![1, 2], vec![3]], 0), TokenSeq::single(vec![4, 5, 6])];
    let rep = gradcheck::check(&params, 1e-5, |g, p| {
        let taps = m.encode_batch(g, p, &batch, &[1, 2], None)?;
        let a = m.head(g, p, BranchId::Intact, taps[1])?;
        let b = m.head(g, p, BranchId::Mod, taps[0])?;
        let la = g.log_softmax(a, 1)?;
        let la = g.gather(la, &[0, 2])?;
        let lb = g.softmax(b, 1)?;
        let lb = g.mul(lb, lb)?;
        let s1 = g.sum_all(la)?;
        let s2 = g.sum_all(lb)?;
        g.sub(s2, s1)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn smoke_train_separable_toy() {
    // class 0 sequences use tokens 1..=4, class 1 uses 5..=8
    let cfg = EncoderConfig { n_layers: 1, d_model: 8, d_ff: 8, vocab_size: 9, n_classes: 2, ..small() };
    let mut m = Model::<f64>::new(cfg, &[], 9).unwrap();
    let mut rng = seed::rng(0, &[]);
    let data: Vec<(TokenSeq, usize)> = (0..64)
        .map(|i| {
            let y = i % 2;
            let ids = (0..3).map(|_| 1 + 4 * y + rng.gen_range(0..4)).collect();
            (TokenSeq::single(ids), y)
        })
        .collect();
    let mut opt = AdamW::new(AdamWConfig { lr: 1e-2, ..Default::default() }, 60);
    for _ in 0..60 {
        let mut g = Graph::new();
        let p = m.store.bind(&mut g, true);
        let seqs: Vec<TokenSeq> = data.iter().map(|d| d.0.clone()).collect();
        let ys: Vec<usize> = data.iter().map(|d| d.1).collect();
        let rep = m.encode_batch(&mut g, &p, &seqs, &[1], None).unwrap()[0];
        let z = m.head(&mut g, &p, BranchId::Intact, rep).unwrap();
        let lp = g.log_softmax(z, 1).unwrap();
        let picked = g.gather(lp, &ys).unwrap();
        let nll = g.mean_all(picked).unwrap();
        let loss = g.neg(nll).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<Option<&[f64]>> = p.iter().map(|&v| g.grad(v).unwrap()).collect();
        opt.step(&mut m.store, &grads).unwrap();
    }
    let correct = data
        .iter()
        .filter(|(s, y)| {
            let z = m.head_forward(BranchId::Intact, &m.encode(s, None).unwrap()).unwrap();
            (z[1] > z[0]) == (*y == 1)
        })
        .count();
    assert!(correct as f64 / data.len() as f64 > 0.95, "{correct}/64");
}

#[test]
fn branch_ids_round_trip() {
    for b in [BranchId::Intact, BranchId::Gra, BranchId::Sub(2), BranchId::Half, BranchId::Mod, BranchId::Rep] {
        assert_eq!(b.to_string().parse::<BranchId>().unwrap(), b);
    }
    assert!("sub0".parse::<BranchId>().is_err());
}
