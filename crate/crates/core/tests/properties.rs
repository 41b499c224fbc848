use ffb_core::dataset::{generate_corpus, parse_corpus, DatasetSpec, LoadMode};
use ffb_core::evaluation::{glitch_rate, replicate_stats, EvalError, EvalMode, OraclePredictor, Predictor};
use ffb_core::ffl::{self, FflParams, FflString, ReadValidity, Token};
use ffb_core::models::{sharpening_loss, AttentionRecord, ModelConfig, SequenceModel, TransformerConfig};
use ffb_core::tensor::{Graph, SharpenKind, Tensor};
use ffb_core::training::{loss_mask, online_seed, ScheduleShape, SharpenSchedule};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = FflParams> {
    (2usize..=40, 0.0f64..=1.0, 0.0f64..=1.0, 2u8..=10).prop_map(|(pairs, a, b, vocab)| {
        let p_write = a;
        let p_read = (1.0 - a) * b;
        FflParams::new(2 * pairs, p_write, p_read, vocab).unwrap()
    })
}

fn binary_strings(max_pairs: usize, n: usize) -> impl Strategy<Value = Vec<FflString>> {
    (2usize..=max_pairs, 0.0f64..0.99, any::<u64>()).prop_map(move |(pairs, pi, seed)| {
        let p = FflParams::ffl_with_length(pi, 2 * pairs);
        (0..n as u64).map(|i| ffl::sample(&p, seed.wrapping_add(i))).collect()
    })
}

fn tiny_transformer(max_len: usize) -> ModelConfig {
    ModelConfig::Transformer(TransformerConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        max_len,
        ..TransformerConfig::default()
    })
}

/// Delegates to a model with a chosen chunk size.
struct Chunked<'a, P>(&'a P, usize);

impl<P: Predictor> Predictor for Chunked<'_, P> {
    fn vocab(&self) -> usize {
        self.0.vocab()
    }
    fn logits(&self, batch: &[&FflString]) -> Result<Vec<Tensor<f64>>, EvalError> {
        self.0.logits(batch)
    }
    fn batch_size(&self) -> usize {
        self.1
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn samples_are_valid(p in params(), seed in any::<u64>()) {
        let s = ffl::sample(&p, seed);
        prop_assert_eq!(s.len(), p.length);
        prop_assert!(ffl::validate_structure(s.tokens()));
        prop_assert!(matches!(ffl::validate_reads(s.tokens()), Ok(ReadValidity::Valid)));
        prop_assert!(s.max_data_symbol().unwrap() < p.vocab);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn corpus_text_round_trips(p in params(), count in 0usize..20, seed in any::<u64>()) {
        let spec = DatasetSpec::single(p, count, seed, "train");
        let c = generate_corpus(&spec).unwrap();
        let back = parse_corpus(&c.to_text(), LoadMode::Strict).unwrap();
        prop_assert_eq!(&back, &c.sequences);
        prop_assert_eq!(DatasetSpec::from_meta(&spec.to_meta()).unwrap(), spec.clone());
        for (i, s) in c.sequences.iter().enumerate() {
            prop_assert_eq!(s, &spec.sample_index(i as u64));
        }
        prop_assert_eq!(generate_corpus(&spec).unwrap().to_text(), c.to_text());
    }

    #[test]
    fn oracle_scores_zero(seqs in binary_strings(40, 8)) {
        let r = glitch_rate(&OraclePredictor { data_vocab: 2 }, &seqs, EvalMode::Clean).unwrap();
        prop_assert_eq!(r.n_errors, 0);
        let reads: usize = seqs.iter().map(FflString::count_reads).sum();
        prop_assert_eq!(r.n_read_predictions, reads as u64);
    }

    #[test]
    fn softmax_is_row_stochastic_and_causal(
        n in 1usize..10,
        vals in prop::collection::vec(-30.0f64..30.0, 100),
        temp in 0.05f64..5.0,
    ) {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::new(vec![n, n], vals[..n * n].to_vec()).unwrap());
        let p = g.softmax_rows(s, temp, true).unwrap();
        let a = g.value(p);
        for i in 0..n {
            let total: f64 = a.row(i).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for j in i + 1..n {
                prop_assert_eq!(a.at(i, j), 0.0);
            }
        }
    }

    #[test]
    fn colder_softmax_is_no_less_peaked(
        n in 1usize..10,
        vals in prop::collection::vec(-5.0f64..5.0, 100),
        temp in 0.1f64..5.0,
        ratio in 0.05f64..1.0,
    ) {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::new(vec![n, n], vals[..n * n].to_vec()).unwrap());
        let warm = g.softmax_rows(s, temp, true).unwrap();
        let cold = g.softmax_rows(s, temp * ratio, true).unwrap();
        for i in 0..n {
            let mx = |v| g.value(v).row(i).iter().copied().fold(0.0, f64::max);
            prop_assert!(mx(cold) >= mx(warm) - 1e-12);
        }
    }

    #[test]
    fn clean_loss_ignores_unmasked_positions(seqs in binary_strings(10, 1), logits in prop::collection::vec(-3.0f64..3.0, 100)) {
        let toks = seqs[0].tokens();
        let n = toks.len();
        let v = ffl::vocab_size(2);
        let mask = loss_mask(toks, EvalMode::Clean);
        let data: Vec<f64> = (0..n * v).map(|k| logits[k % logits.len()]).collect();
        let mut targets: Vec<usize> = toks[1..].iter().map(|t| t.index()).collect();
        targets.push(0);
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![n, v], data).unwrap());
        let loss = g.cross_entropy_masked(x, &targets, &mask).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.get_or_zeros(x, &[n, v]);
        for i in 0..n {
            let row_zero = gx.row(i).iter().all(|&d| d == 0.0);
            prop_assert_eq!(row_zero, !mask[i], "row {}", i);
            prop_assert_eq!(mask[i], toks[i] == Token::Read && i + 1 < n);
        }
    }

    #[test]
    fn attention_records_are_causal(seqs in binary_strings(8, 3), seed in any::<u64>()) {
        let m = SequenceModel::<f64>::init(tiny_transformer(16), seed).unwrap();
        let idx: Vec<Vec<usize>> = seqs.iter().map(FflString::indices).collect();
        let (_, records) = m.infer(&idx).unwrap();
        for r in &records {
            for a in r.heads() {
                for i in 0..a.rows() {
                    prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for j in i + 1..a.cols() {
                        prop_assert_eq!(a.at(i, j), 0.0);
                    }
                }
            }
            let h = sharpening_loss(r, SharpenKind::Entropy);
            let t = r.seq_len();
            let cap = (1..t).map(|i| ((i + 1) as f64).ln()).sum::<f64>() / (t - 1) as f64;
            prop_assert!(h >= -1e-12 && h <= cap + 1e-12, "{} not in [0, {}]", h, cap);
        }
    }

    #[test]
    fn reports_do_not_depend_on_chunking(seqs in binary_strings(8, 9), seed in any::<u64>(), chunk in 1usize..10) {
        let m = SequenceModel::<f64>::init(tiny_transformer(16), seed).unwrap();
        let a = glitch_rate(&Chunked(&m, chunk), &seqs, EvalMode::Clean).unwrap();
        let b = glitch_rate(&Chunked(&m, seqs.len()), &seqs, EvalMode::Clean).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.dependency_histogram.values().sum::<u64>(), a.n_errors);
        prop_assert_eq!(glitch_rate(&m, &seqs, EvalMode::Clean).unwrap(), a);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>()) {
        let m = SequenceModel::<f32>::init(tiny_transformer(12), seed).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = SequenceModel::<f32>::read_checkpoint(&buf[..]).unwrap();
        prop_assert_eq!(&back.config, &m.config);
        prop_assert_eq!(back.params.count(), m.params.count());
        let x = vec![vec![0, 3, 2, 4, 1, 3]];
        prop_assert_eq!(back.infer(&x).unwrap().0, m.infer(&x).unwrap().0);
    }

    #[test]
    fn schedule_is_pointwise(start in 0u64..100, extra in 1u64..100, lambda in 0.0f64..1.0, step in 0u64..250) {
        let total = start + extra;
        let c = SharpenSchedule { shape: ScheduleShape::Constant, start, lambda };
        let r = SharpenSchedule { shape: ScheduleShape::LinearRamp, start, lambda };
        let (cc, rc) = (c.coefficient(step, total), r.coefficient(step, total));
        if step < start {
            prop_assert_eq!((cc, rc), (0.0, 0.0));
        } else {
            prop_assert_eq!(cc, lambda);
            prop_assert!((rc - lambda * (step - start) as f64 / extra as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn online_seeds_are_distinct(data_seed in any::<u64>(), batch in 1usize..20, steps in 1u64..30) {
        let mut seen = std::collections::HashSet::new();
        for step in 1..=steps {
            for b in 0..batch {
                prop_assert!(seen.insert(online_seed(data_seed, step, batch, b)));
            }
        }
    }

    #[test]
    fn replicate_stats_are_ordered(mut rates in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let s = replicate_stats(&rates).unwrap();
        prop_assert!(s.min <= s.q25 && s.q25 <= s.median && s.median <= s.q75 && s.q75 <= s.max);
        prop_assert!(rates.contains(&s.median));
        rates.reverse();
        prop_assert_eq!(replicate_stats(&rates).unwrap(), s);
    }
}

#[test]
fn entropy_bounds_are_attained() {
    let t = 5;
    let one_hot = Tensor::from_fn(&[t, t], |k| if k % t == 0 { 1.0 } else { 0.0 });
    let uniform = Tensor::from_fn(&[t, t], |k| {
        let (i, j) = (k / t, k % t);
        if j <= i {
            1.0 / (i + 1) as f64
        } else {
            0.0
        }
    });
    let rec = |a: Tensor<f64>| AttentionRecord { layers: vec![vec![a]] };
    assert_eq!(sharpening_loss(&rec(one_hot), SharpenKind::Entropy), 0.0);
    let cap = (1..t).map(|i| ((i + 1) as f64).ln()).sum::<f64>() / (t - 1) as f64;
    let h = sharpening_loss(&rec(uniform), SharpenKind::Entropy);
    assert!((h - cap).abs() < 1e-12);
}
