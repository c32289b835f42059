use std::path::Path;

use mafnet::image_io::{decode_image, decode_pfm, encode_pfm, encode_pgm, encode_ppm, read_pfm, write_pfm, Endian};
use mafnet::Error;
use mafnet_core::head::DisparityMap;
use mafnet_core::init::Rng;
use mafnet_core::Tensor;

fn f32_map(h: usize, w: usize, seed: u64) -> DisparityMap {
    let mut rng = Rng::new(seed);
    let vals = Tensor::from_fn(&[h, w], |_| rng.uniform(0.0, 200.0) as f32 as f64);
    let valid = (0..h * w).map(|i| i % 7 != 3).collect();
    DisparityMap::new(vals, valid).unwrap()
}

fn valid_values(m: &DisparityMap) -> Vec<Option<f64>> {
    m.values.data().iter().zip(&m.valid).map(|(v, ok)| ok.then_some(*v)).collect()
}

fn field_of(e: Error) -> &'static str {
    match e {
        Error::Format { field, .. } => field,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn pfm_round_trip_is_lossless_at_f32() {
    let dir = tempfile::tempdir().unwrap();
    for (i, (h, w)) in [(1, 1), (3, 5), (32, 64)].into_iter().enumerate() {
        let map = f32_map(h, w, i as u64);
        let path = dir.path().join(format!("{i}.pfm"));
        write_pfm(&map, &path).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!((back.height(), back.width()), (h, w));
        assert_eq!(valid_values(&back), valid_values(&map));
        for endian in [Endian::Little, Endian::Big] {
            let again = decode_pfm(&encode_pfm(&map, endian), Path::new("mem")).unwrap();
            assert_eq!(valid_values(&again), valid_values(&map));
        }
    }
}

#[test]
fn big_endian_fixture_reads_bottom_row_first() {
    // 2x2, scale +1: big endian; file rows run bottom to top
    let mut bytes = b"Pf\n2 2\n1.0\n".to_vec();
    for v in [1.5f32, 2.0, 3.0, -1.0] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    let m = decode_pfm(&bytes, Path::new("fixture.pfm")).unwrap();
    assert_eq!(m.values.data(), &[3.0, 0.0, 1.5, 2.0]);
    assert_eq!(m.valid, vec![true, false, true, true]);
}

#[test]
fn little_endian_header_layout() {
    let m = DisparityMap::dense(Tensor::new(&[1, 2], vec![0.25, 4.0]).unwrap()).unwrap();
    let bytes = encode_pfm(&m, Endian::Little);
    let mut want = b"Pf\n2 1\n-1.0\n".to_vec();
    want.extend_from_slice(&0.25f32.to_le_bytes());
    want.extend_from_slice(&4.0f32.to_le_bytes());
    assert_eq!(bytes, want);
}

#[test]
fn malformed_pfm_names_the_field() {
    let p = Path::new("bad.pfm");
    assert_eq!(field_of(decode_pfm(b"PF\n1 1\n-1.0\n\0\0\0\0", p).unwrap_err()), "magic");
    assert_eq!(field_of(decode_pfm(b"P5\n1 1\n-1.0\n\0\0\0\0", p).unwrap_err()), "magic");
    assert_eq!(field_of(decode_pfm(b"Pf\n0 1\n-1.0\n", p).unwrap_err()), "width");
    assert_eq!(field_of(decode_pfm(b"Pf\n1 x\n-1.0\n", p).unwrap_err()), "height");
    assert_eq!(field_of(decode_pfm(b"Pf\n1 1\n0\n\0\0\0\0", p).unwrap_err()), "scale");
    assert_eq!(field_of(decode_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0", p).unwrap_err()), "payload");
    assert_eq!(field_of(decode_pfm(b"", p).unwrap_err()), "magic");
}

#[test]
fn pgm_preview_scales_and_blanks_invalid() {
    let m = DisparityMap::new(Tensor::new(&[1, 3], vec![0.0, 16.0, 8.0]).unwrap(), vec![true, true, false]).unwrap();
    let bytes = encode_pgm(&m, 16.0);
    assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
    assert_eq!(&bytes[bytes.len() - 3..], &[0, 255, 0]);
}

#[test]
fn ppm_round_trip_at_8_bits() {
    let img = Tensor::from_fn(&[3, 2, 3], |i| (i * 13 % 256) as f64 / 255.0);
    let back = decode_image(&encode_ppm(&img), Path::new("mem.ppm")).unwrap();
    assert!(back.max_abs_diff(&img) < 1e-12);
}

#[test]
fn grayscale_pgm_is_replicated_to_three_channels() {
    let mut bytes = b"P5\n2 1\n255\n".to_vec();
    bytes.extend_from_slice(&[0, 255]);
    let img = decode_image(&bytes, Path::new("g.pgm")).unwrap();
    assert_eq!(img.shape(), &[3, 1, 2]);
    assert_eq!(img.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
}
