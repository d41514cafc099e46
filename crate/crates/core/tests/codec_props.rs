//! SeedPack round trips and rejection of damaged input.

use proptest::prelude::*;
use sinefm::codec::{pack, unpack};
use sinefm::network::{convert_to_sinefm, tiny_resnet, tiny_unet, tiny_vgg, Model};
use sinefm::rng::Xoshiro256;
use sinefm::transforms::TransformFamily;
use sinefm::{Error, Shape, Tensor};

fn model(arch: usize, family: TransformFamily, seed: u64) -> Model<f32> {
    let base = match arch {
        0 => tiny_vgg(4, 16),
        1 => tiny_resnet(4, 16),
        _ => tiny_unet(2, 16),
    };
    Model::build(&convert_to_sinefm(&base, 16, 5, family, seed), seed).unwrap()
}

fn input(seed: u64, n: usize) -> Tensor<f32> {
    let mut rng = Xoshiro256::seed_from_u64(seed);
    let s = Shape::new(n, 3, 16, 16).unwrap();
    Tensor::from_vec(s, (0..s.numel()).map(|_| rng.normal() as f32).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn round_trip_preserves_predictions(arch in 0usize..3, fam in 0u8..9, seed in any::<u64>()) {
        let family = TransformFamily::from_tag(fam).unwrap();
        let m = model(arch, family, seed);
        let bytes = pack(&m);
        prop_assert_eq!(&pack(&m), &bytes);
        let back = unpack(&bytes).unwrap();
        let x = input(seed, 2);
        prop_assert!(m.predict(&x).unwrap().bit_eq(&back.predict(&x).unwrap()));
    }

    #[test]
    fn any_flipped_byte_is_rejected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let bytes = pack(&model(0, TransformFamily::Sinusoidal, 1));
        let mut bad = bytes.clone();
        let i = pos.index(bytes.len());
        bad[i] ^= 1 << bit;
        prop_assert!(unpack(&bad).is_err());
    }

    #[test]
    fn truncation_is_a_format_error(cut in any::<prop::sample::Index>()) {
        let bytes = pack(&model(2, TransformFamily::GaussianRbf, 2));
        let n = cut.index(bytes.len());
        let r = unpack(&bytes[..n]);
        prop_assert!(matches!(r, Err(Error::Format(_))), "{:?}", r.err());
    }
}

#[test]
fn payload_flip_reports_checksum_offset() {
    let bytes = pack(&model(1, TransformFamily::Sinusoidal, 3));
    let mut bad = bytes.clone();
    bad[bytes.len() / 2] ^= 0x01;
    match unpack(&bad) {
        Err(Error::Corruption { offset, stored, computed }) => {
            assert_eq!(offset, bytes.len() - 8);
            assert_ne!(stored, computed);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_family_tag_is_a_version_error() {
    let m = Model::<f32>::build(
        &sinefm::ArchDescriptor::from_text("input 3 8 8\nsinefm 3 8 2 3 1 1 2 sinusoidal 5\n").unwrap(),
        0,
    )
    .unwrap();
    let mut bytes = pack(&m);
    let fam = bytes.len() - 9;
    bytes[fam] = 42;
    let body = bytes.len() - 8;
    let sum = sinefm::codec::fnv1a64(&bytes[..body]);
    bytes[body..].copy_from_slice(&sum.to_le_bytes());
    assert!(matches!(unpack(&bytes), Err(Error::Version(_))));
}
