use cpgg_core::checkpoint::*;
use cpgg_core::numerics::{AdamW, AdamWConfig, Graph, ParamStore, Rng};
use cpgg_core::Error;
use proptest::prelude::*;

fn store(seed: u64) -> ParamStore<f32> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    s.add_normal("a.weight", [3, 4], 1.0, &mut rng);
    s.add_normal("b", [5], 1.0, &mut rng);
    s.add_normal("conv", [2, 1, 3, 3, 3], 1.0, &mut rng);
    s
}

#[test]
fn round_trip_is_bit_exact_with_metadata() {
    let s = store(1);
    let mut opt = AdamW::new(&s, AdamWConfig::default());
    let mut s2 = s.clone();
    let grads = {
        let mut g = Graph::with_params(&s2);
        let id = s2.id("b").unwrap();
        let p = g.param(id);
        let q = g.square(p);
        let l = g.sum(q);
        g.backward(l).unwrap();
        g.param_grads()
    };
    s2.accumulate(&grads);
    opt.step(&mut s2).unwrap();

    let mut ck = Checkpoint::from_store(&s2, Some(&opt));
    let mut rng = Rng::new(77);
    rng.normal();
    ck.set_rng(&rng);
    ck.meta.insert("config".into(), "mar.width = 64\n".into());
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    assert_eq!(&buf[..4], b"CPGW");
    assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), VERSION);
    let back = Checkpoint::read_from(buf.as_slice()).unwrap();
    assert_eq!(back, ck);

    let mut fresh = store(2);
    back.restore_params(&mut fresh).unwrap();
    for ((_, a), (_, b)) in fresh.iter().zip(s2.iter()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let mut opt2 = AdamW::new(&fresh, AdamWConfig::default());
    back.restore_optimizer(&fresh, &mut opt2).unwrap();
    assert_eq!(opt2.step, 1);
    assert_eq!(opt2.m, opt.m);
    let mut r2 = back.rng().unwrap().unwrap();
    assert_eq!(r2.normal(), rng.normal());
}

#[test]
fn layout_of_a_single_tensor() {
    let mut ck = Checkpoint::default();
    ck.tensors.push(NamedTensor { name: "w".into(), dims: vec![2], data: vec![1.0, -2.0] });
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    let mut want = b"CPGW".to_vec();
    want.extend(1u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(1u16.to_le_bytes());
    want.push(b'w');
    want.push(1);
    want.extend(2u32.to_le_bytes());
    want.extend(1.0f32.to_le_bytes());
    want.extend((-2.0f32).to_le_bytes());
    want.extend(0u32.to_le_bytes());
    assert_eq!(buf, want);
}

#[test]
fn version_mismatch_names_both_versions() {
    let mut buf = Vec::new();
    Checkpoint::default().write_to(&mut buf).unwrap();
    buf[4..8].copy_from_slice(&7u32.to_le_bytes());
    let err = Checkpoint::read_from(buf.as_slice()).unwrap_err();
    assert!(matches!(err, Error::Version { found: 7, expected: 1, .. }));
    let msg = err.to_string();
    assert!(msg.contains('7') && msg.contains('1'), "{msg}");
    buf[0] = b'X';
    assert!(Checkpoint::read_from(buf.as_slice()).is_err());
}

#[test]
fn missing_or_misshapen_parameters_are_rejected() {
    let ck = Checkpoint::from_store(&store(1), None);
    let mut other = store(1);
    other.add_normal("extra", [2], 1.0, &mut Rng::new(0));
    assert!(ck.restore_params(&mut other).unwrap_err().to_string().contains("extra"));
    let mut bad = ParamStore::<f32>::new();
    bad.add_normal("b", [6], 1.0, &mut Rng::new(0));
    assert!(ck.restore_params(&mut bad).is_err());
}

proptest! {
    #[test]
    fn arbitrary_tensors_round_trip(
        dims in prop::collection::vec(1usize..5, 0..4),
        bits in prop::collection::vec(any::<u32>(), 64),
        key in "[a-z.]{1,12}",
        value in ".{0,40}",
    ) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| f32::from_bits(bits[i % 64])).collect();
        let mut ck = Checkpoint::default();
        ck.tensors.push(NamedTensor { name: "t".into(), dims, data });
        ck.meta.insert(key, value);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back.meta, ck.meta.clone());
        let a: Vec<u32> = back.tensors[0].data.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = ck.tensors[0].data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }
}
