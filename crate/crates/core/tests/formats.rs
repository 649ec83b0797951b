//! Binary artifacts survive encode -> decode -> encode unchanged, and no
//! strict prefix of a valid artifact decodes.

mod common;

use evssl::eval::{decode_etab, encode_etab, read_etab, write_etab, EmbeddingTable};
use evssl::event::{decode_evt1, encode_evt1, read_evt1, write_evt1};
use evssl::model::{
    decode_checkpoint, decode_tvec, encode_checkpoint, encode_tvec, init_model, read_checkpoint, write_checkpoint,
    ModelDims,
};
use evssl::rng::rng_from;
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6f64..1e6, Just(0.0), Just(-0.0), Just(f64::MIN_POSITIVE), Just(f64::MAX)]
}

fn prefixes_rejected<T, E>(bytes: &[u8], decode: impl Fn(&[u8]) -> Result<T, E>) -> bool {
    let step = (bytes.len() / 64).max(1);
    (0..bytes.len()).step_by(step).all(|n| decode(&bytes[..n]).is_err())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn evt1_roundtrip(seed in any::<u64>()) {
        let s = common::random_stream(&mut rng_from(seed, &[]), 4096, 500);
        let bytes = encode_evt1(&s).unwrap();
        let back = decode_evt1(&bytes).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(encode_evt1(&back).unwrap(), bytes.clone());
        prop_assert!(prefixes_rejected(&bytes, decode_evt1));
    }

    #[test]
    fn tvec_roundtrip(v in prop::collection::vec(finite(), 1..128)) {
        let bytes = encode_tvec(&v);
        let back = decode_tvec(&bytes).unwrap();
        prop_assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert!(prefixes_rejected(&bytes, decode_tvec));
    }

    #[test]
    fn etab_roundtrip(n in 0usize..30, d in 1usize..16, labeled in any::<bool>(), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = rng_from(seed, &[]);
        let rows: Vec<f64> = (0..n * d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let labels = labeled.then(|| (0..n).map(|_| rng.random_range(0..7)).collect());
        let tab = EmbeddingTable::new(n, d, rows, labels).unwrap();
        let bytes = encode_etab(&tab);
        let back = decode_etab(&bytes).unwrap();
        prop_assert_eq!(&back, &tab);
        prop_assert_eq!(encode_etab(&back), bytes.clone());
        prop_assert!(prefixes_rejected(&bytes, decode_etab));
    }

    #[test]
    fn evck_roundtrip(seed in any::<u64>(), p in 1usize..4, l in 1usize..5, d in 1usize..8, e in 1usize..6, step in any::<u64>()) {
        let mut st = init_model(seed, ModelDims { patch_size: p, num_patches: l, embed_dim: d, proj_dim: e }).unwrap();
        st.step = step;
        let bytes = encode_checkpoint(&st);
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &st);
        prop_assert_eq!(encode_checkpoint(&back), bytes.clone());
        prop_assert!(prefixes_rejected(&bytes, decode_checkpoint));
    }
}

#[test]
fn file_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let s = common::random_stream(&mut rng_from(5, &[]), 64, 200);
    let p = dir.path().join("a.evt1");
    write_evt1(&p, &s).unwrap();
    assert_eq!(read_evt1(&p).unwrap(), s);

    let st = init_model(1, ModelDims { patch_size: 2, num_patches: 3, embed_dim: 4, proj_dim: 2 }).unwrap();
    let p = dir.path().join("c.evck");
    write_checkpoint(&p, &st).unwrap();
    assert_eq!(read_checkpoint(&p).unwrap(), st);

    let tab = EmbeddingTable::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], Some(vec![0, 1])).unwrap();
    let p = dir.path().join("t.etab");
    write_etab(&p, &tab).unwrap();
    assert_eq!(read_etab(&p).unwrap(), tab);
}

#[test]
fn trailing_bytes_rejected() {
    let s = common::random_stream(&mut rng_from(6, &[]), 32, 10);
    let mut b = encode_evt1(&s).unwrap();
    b.push(0);
    assert!(decode_evt1(&b).is_err());
    let mut b = encode_tvec(&[1.0, 2.0]);
    b.push(0);
    assert!(decode_tvec(&b).is_err());
    let mut b = encode_etab(&EmbeddingTable::new(1, 1, vec![1.0], None).unwrap());
    b.push(0);
    assert!(decode_etab(&b).is_err());
}
