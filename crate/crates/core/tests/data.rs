use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wdpp::data::*;
use wdpp::{Error, KernelFactor, Subset};

#[test]
fn one_indexed_line_shifts() {
    let ds = parse_baskets("1,12\n", true, None).unwrap();
    assert_eq!(ds.baskets, vec![Subset::new(vec![0, 11])]);
    assert_eq!(ds.m, 12);
}

#[test]
fn parsing_dedups_and_skips_blank_lines() {
    let ds = parse_baskets("3,1,3\n\n  \n2\n", false, Some(5)).unwrap();
    assert_eq!(ds.baskets, vec![Subset::new(vec![1, 3]), Subset::new(vec![2])]);
    assert_eq!(ds.m, 5);
}

#[test]
fn parse_errors_carry_line_numbers() {
    match parse_baskets("1,2\n3,x\n", true, None) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_baskets("0\n", true, None), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(
        parse_baskets("1,9\n", true, Some(5)),
        Err(Error::ItemOutOfRange { id: 8, m: 5 })
    ));
}

#[test]
fn empty_file_gives_empty_dataset_that_cannot_split() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    std::fs::write(&path, "").unwrap();
    let ds = load_baskets(&path, true, None).unwrap();
    assert!(ds.is_empty());
    assert_eq!(ds.m, 0);
    assert!(matches!(split(ds, 0), Err(Error::TooFewBaskets { .. })));
}

#[test]
fn missing_file_is_an_io_error() {
    let r = load_baskets(std::path::Path::new("/nonexistent/baskets.csv"), true, None);
    assert!(matches!(r, Err(Error::Io(_))));
}

#[test]
fn write_then_load_round_trips() {
    let baskets = vec![Subset::new(vec![0, 4, 2]), Subset::new(vec![3]), Subset::new(vec![1, 2])];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.csv");
    write_baskets(&path, &baskets, true).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "1,3,5\n4\n2,3\n");
    let ds = load_baskets(&path, true, Some(5)).unwrap();
    assert_eq!(ds.baskets, baskets);
    write_baskets(&path, &ds.baskets, true).unwrap();
    assert_eq!(load_baskets(&path, true, Some(5)).unwrap().baskets, baskets);
}

#[test]
fn registry_sized_split() {
    let baskets: Vec<Subset> = (0..14_970).map(|i| Subset::new(vec![i % 100])).collect();
    let ds = BasketDataset::new(100, baskets, "test").unwrap();
    let a = split(ds.clone(), 5).unwrap();
    assert_eq!(a.train().len(), 12_670);
    assert_eq!(a.validation().len(), 300);
    assert_eq!(a.test().len(), 2000);
    let s = a.split.as_ref().unwrap();
    let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..14_970).collect::<Vec<_>>());
    let b = split(ds.clone(), 5).unwrap();
    assert_eq!(a.split, b.split);
    let c = split(ds, 6).unwrap();
    assert_ne!(a.split, c.split);
}

#[test]
fn split_needs_more_than_the_held_out_sets() {
    let baskets = vec![Subset::new(vec![0]); 2300];
    let ds = BasketDataset::new(1, baskets, "test").unwrap();
    assert!(split(ds.clone(), 0).is_err());
    let mut more = ds.baskets.clone();
    more.push(Subset::new(vec![0]));
    let ds = BasketDataset::new(1, more, "test").unwrap();
    assert_eq!(split(ds, 0).unwrap().train().len(), 1);
}

#[test]
fn filter_min_size_drops_small_baskets() {
    let ds = parse_baskets("1\n1,2\n3\n2,3,4\n", true, None).unwrap();
    let f = ds.filter_min_size(2);
    assert_eq!(f.len(), 2);
    assert!(f.baskets.iter().all(|b| b.len() >= 2));
}

#[test]
fn zero_kernel_yields_empty_baskets() {
    let zero = KernelFactor::zeros(5, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bs = sample_dataset(&zero, 200, &mut rng).unwrap();
    assert!(bs.iter().all(Subset::is_empty));
}

#[test]
fn synthetic_zero_baskets() {
    let (f, ds) = generate_synthetic(7, 3, 0, 1).unwrap();
    assert!(ds.is_empty());
    assert_eq!((f.m(), f.k()), (7, 3));
    assert_eq!(ds.m, 7);
}

#[test]
fn synthetic_is_seeded() {
    let (fa, a) = generate_synthetic(8, 3, 100, 4).unwrap();
    let (fb, b) = generate_synthetic(8, 3, 100, 4).unwrap();
    assert_eq!(fa, fb);
    assert_eq!(a.baskets, b.baskets);
}

#[test]
fn synthetic_too_large_to_enumerate() {
    assert!(generate_synthetic(30, 5, 10, 0).is_err());
}

#[test]
fn synthetic_marginals_match_ground_truth() {
    let n = 20_000;
    let (truth, ds) = generate_synthetic(10, 4, n, 9).unwrap();
    let q = truth.marginal_kernel().unwrap().inclusion_probs();
    let mut counts = vec![0usize; 10];
    for b in &ds.baskets {
        for &i in b.indices() {
            counts[i] += 1;
        }
    }
    for (i, &c) in counts.iter().enumerate() {
        let p = c as f64 / n as f64;
        let se = (q[i] * (1.0 - q[i]) / n as f64).sqrt();
        assert!((p - q[i]).abs() <= 3.0 * se + 1e-12, "item {i}: {p} vs {}", q[i]);
    }
}

#[test]
fn model_file_round_trip_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = KernelFactor::random_init(9, 4, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.txt");
    save_model(&f, &path).unwrap();
    let g = load_model(&path).unwrap();
    assert_eq!(f.v().as_slice(), g.v().as_slice());
}

#[test]
fn corrupted_model_files_are_rejected() {
    assert!(model_from_str("").is_err());
    assert!(model_from_str("two 1\n0.5\n0.5\n").is_err());
    assert!(model_from_str("2\n0.5\n0.5\n").is_err());
    // rank above catalog size
    assert!(matches!(model_from_str("1 2\n0.5 0.5\n"), Err(Error::ModelFormat(_))));
    assert!(model_from_str("2 1\n0.5\n").is_err());
    assert!(model_from_str("2 1\n0.5 0.1\n0.5\n").is_err());
    assert!(model_from_str("2 1\n0.5\nnan\n").is_err());
}

proptest! {
    #[test]
    fn model_string_round_trip(entries in prop::collection::vec(-1e3f64..1e3, 12)) {
        let f = KernelFactor::new(DMatrix::from_row_slice(4, 3, &entries)).unwrap();
        let g = model_from_str(&model_to_string(&f)).unwrap();
        prop_assert_eq!(f.v().as_slice(), g.v().as_slice());
    }

    #[test]
    fn basket_text_round_trip(raw in prop::collection::vec(prop::collection::vec(0usize..30, 1..6), 0..20)) {
        let baskets: Vec<Subset> = raw.into_iter().map(Subset::new).collect();
        let text: String = baskets
            .iter()
            .map(|b| b.indices().iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(",") + "\n")
            .collect();
        let ds = parse_baskets(&text, true, Some(30)).unwrap();
        prop_assert_eq!(ds.baskets, baskets);
    }
}
