use proptest::prelude::*;
use vidseg_tensor::msat;
use vidseg_tensor::{AnyTensor, Tensor};

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(1usize..4, 0..=4)
}

proptest! {
    #[test]
    fn round_trip_is_byte_exact(shape in shape_strategy(), dtype in 0u8..3, seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let t = match dtype {
            0 => AnyTensor::F32(Tensor::from_fn(&shape, |i| f32::from_bits((seed as u32).wrapping_mul(i as u32 + 1) & 0x7f7f_ffff))),
            1 => AnyTensor::F64(Tensor::from_fn(&shape, |i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) & 0x7fef_ffff_ffff_ffff))),
            _ => AnyTensor::U32(Tensor::from_fn(&shape, |i| (seed as u32) ^ i as u32)),
        };
        let bytes = msat::encode(&t);
        prop_assert_eq!(bytes.len(), 12 + 8 * shape.len() + n * if dtype == 1 { 8 } else { 4 });
        let back = msat::decode(&bytes).unwrap();
        prop_assert_eq!(msat::encode(&back), bytes);
        prop_assert_eq!(back.shape(), &shape[..]);
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.msat");
    let t = AnyTensor::F64(Tensor::from_fn(&[2, 3, 1, 2], |i| i as f64 * -0.5));
    msat::write(&path, &t).unwrap();
    assert_eq!(msat::read(&path).unwrap(), t);

    std::fs::write(&path, &msat::encode(&t)[..20]).unwrap();
    assert!(msat::read(&path).is_err());
}
