use ckn::aggregation::{read_counts, write_counts, Codebook};
use ckn::encoder::{read_descriptors, write_descriptors, Architecture, CknModel};
use ckn::input::InputType;
use ckn::pca::{PcaMode, PcaModel};
use ckn::CknError;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn f32_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f32>> {
    prop::collection::vec(-1e6f32..1e6, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn descriptors_round_trip(rows in 0usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let data = Array2::from_shape_fn((rows, cols), |(i, j)| f32::from_bits((seed as u32).wrapping_add((i * 31 + j) as u32 * 7919) & 0x7f7f_ffff));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cknd");
        write_descriptors(&path, data.view()).unwrap();
        let back = read_descriptors(&path).unwrap();
        prop_assert_eq!(back.dim(), data.dim());
        prop_assert!(back.iter().zip(data.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn codebook_round_trip(c in (1usize..5, 1usize..7).prop_flat_map(|(k, d)| f32_matrix(k, d))) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cknc");
        let book = Codebook::new(c).unwrap();
        book.save(&path).unwrap();
        prop_assert_eq!(Codebook::load(&path).unwrap(), book);
    }

    #[test]
    fn pca_round_trip(d in 1usize..6, k in 1usize..4, values in prop::collection::vec(-1e3f64..1e3, 64)) {
        let k = k.min(d);
        let model = PcaModel {
            mode: PcaMode::Semi,
            mean: Array1::from_iter((0..d).map(|i| values[i])),
            scales: Array1::from_iter((0..k).map(|i| values[10 + i].abs())),
            projection: Array2::from_shape_fn((k, d), |(i, j)| values[20 + i * d + j] / 7.0),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.cknp");
        model.save(&path).unwrap();
        prop_assert_eq!(PcaModel::load(&path).unwrap(), model);
    }

    #[test]
    fn counts_round_trip(counts in prop::collection::vec(0usize..100_000, 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.counts");
        write_counts(&path, &counts).unwrap();
        prop_assert_eq!(read_counts(&path).unwrap(), counts);
    }
}

fn f32_exact(model: &mut CknModel) {
    for l in &mut model.layers {
        l.weights.mapv_inplace(|v| v as f32 as f64);
        l.bias.mapv_inplace(|v| v as f32 as f64);
    }
}

#[test]
fn model_round_trip_for_every_architecture() {
    let dir = tempfile::tempdir().unwrap();
    for (i, input) in [InputType::Raw, InputType::White { subpatch: 3 }, InputType::Grad].into_iter().enumerate() {
        let mut model = CknModel::random(&Architecture::reference(input), 0.6, i as u64).unwrap();
        f32_exact(&mut model);
        let path = dir.path().join(format!("m{i}.cknm"));
        model.save(&path).unwrap();
        let back = CknModel::load(&path).unwrap();
        assert_eq!(back, model);
        let again = dir.path().join(format!("m{i}b.cknm"));
        back.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}

#[test]
fn bad_magic_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.cknm");
    std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
    let err = CknModel::load(&path).unwrap_err();
    assert!(matches!(err, CknError::Format { .. }));
    assert!(err.to_string().contains("broken.cknm"), "{err}");
    assert!(read_descriptors(&path).unwrap_err().to_string().contains("broken.cknm"));
    assert!(Codebook::load(&path).unwrap_err().to_string().contains("bad magic"));
    assert!(PcaModel::load(&path).is_err());
}

#[test]
fn truncated_and_trailing_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.cknd");
    write_descriptors(&path, Array2::<f32>::ones((3, 4)).view()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(read_descriptors(&path).unwrap_err().to_string().contains("truncated"));
    let mut longer = bytes.clone();
    longer.push(0);
    std::fs::write(&path, &longer).unwrap();
    assert!(read_descriptors(&path).unwrap_err().to_string().contains("trailing"));
    assert!(matches!(read_descriptors(&dir.path().join("missing")), Err(CknError::Io { .. })));
}
