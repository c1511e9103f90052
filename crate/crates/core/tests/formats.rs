//! Every file a pipeline run emits, read back by the library and by an
//! independent byte-level parser.

use std::path::Path;

use specvol::io::pipeline::{self, Layout};
use specvol::io::{self, svol, PipelineConfig};

/// Bitwise CRC-32 (IEEE, reflected), kept apart from the crate's checksum.
fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Returns dims and samples of an SVOL file.
fn parse_svol(bytes: &[u8]) -> ([u32; 3], Vec<f32>) {
    assert_eq!(&bytes[..4], b"SVOL");
    assert_eq!(le_u32(&bytes[4..]), 1);
    let dims = [
        le_u32(&bytes[8..]),
        le_u32(&bytes[12..]),
        le_u32(&bytes[16..]),
    ];
    let count = dims.iter().product::<u32>() as usize;
    assert_eq!(bytes.len(), 20 + 4 * count + 4);
    let body = &bytes[..bytes.len() - 4];
    assert_eq!(crc32(body), le_u32(&bytes[bytes.len() - 4..]));
    let samples = body[20..]
        .chunks(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    (dims, samples)
}

fn parse_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    (header, rows)
}

fn config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::parse(
        "[dataset]\nkind = spin\nn_images = 60\nn = 8\nnoise_ratio = 0.5\nseed = 4\npixel_size_a = 12\n\
         [lowres]\nn = 4\nq = 2\n[graph]\nk = 6\n[specvols]\nr = 3\ndeterministic = true\n\
         [eval]\nfsc_images = 10\nreconstruct = 0, 59\n",
    )
    .unwrap();
    cfg.output = dir.to_path_buf();
    cfg
}

#[test]
fn emitted_files_parse_independently() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    pipeline::run_pipeline(&cfg).unwrap();
    let layout = Layout::new(dir.path());

    let mut svols = 0;
    for sub in ["lowres", "specvols", "recon"] {
        for entry in std::fs::read_dir(dir.path().join(sub)).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().and_then(|e| e.to_str()) != Some("svol") {
                continue;
            }
            let (dims, samples) = parse_svol(&std::fs::read(&path).unwrap());
            let field = svol::read(&path).unwrap();
            let n = field.grid.n as u32;
            assert_eq!(dims, [n, n, n]);
            assert_eq!(samples.len(), field.data.len());
            for (a, b) in samples.iter().zip(&field.data) {
                assert_eq!(*a as f64, *b);
            }
            svols += 1;
        }
    }
    // mean, two eigenvolumes, three spectral volumes, two reconstructions
    assert_eq!(svols, 8);

    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(layout.dataset().join("manifest.json")).unwrap(),
    )
    .unwrap();
    let stack = std::fs::read(layout.dataset().join("images.f32")).unwrap();
    assert_eq!(manifest["n_images"], 60);
    assert_eq!(
        manifest["stack_bytes"].as_u64().unwrap() as usize,
        stack.len()
    );
    assert_eq!(stack.len(), 60 * 8 * 8 * 4);
    assert_eq!(
        manifest["stack_crc32"].as_u64().unwrap() as u32,
        crc32(&stack)
    );
    let ds = io::read_manifest(&layout.dataset()).unwrap();
    let first: Vec<f64> = stack[..8 * 8 * 4]
        .chunks(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    assert_eq!(first, ds.images[0].data);

    let (header, rows) = parse_csv(&layout.lowres().join("betas.csv"));
    assert_eq!(header, ["image", "beta_1", "beta_2"]);
    let coords = pipeline::read_betas(&layout.lowres().join("betas.csv")).unwrap();
    assert_eq!(rows.len(), 60);
    for (s, row) in rows.iter().enumerate() {
        assert_eq!(row[0], s.to_string());
        let vals: Vec<f64> = row[1..].iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals, coords.betas[s]);
    }

    let (header, rows) = parse_csv(&layout.embed().join("basis.csv"));
    assert_eq!(header, ["image", "phi_0", "phi_1", "phi_2"]);
    let basis = pipeline::load_basis(&layout).unwrap();
    assert_eq!(rows[0][0], "eigenvalue");
    let eig: Vec<f64> = rows[0][1..].iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(eig, basis.eigvals);
    for (s, row) in rows[1..].iter().enumerate() {
        for l in 0..3 {
            assert_eq!(row[l + 1].parse::<f64>().unwrap(), basis.phi(s, l));
        }
    }

    // integer shells out to the corner of the N = 8 grid, j in [-4, 3]
    let shells = (-4i64..4)
        .flat_map(|a| (-4i64..4).flat_map(move |b| (-4i64..4).map(move |c| a * a + b * b + c * c)))
        .map(|r2| ((r2 as f64).sqrt() + 0.5).floor() as usize)
        .max()
        .unwrap()
        + 1;
    for r in 1..=3 {
        let (header, rows) = parse_csv(&layout.eval().join(format!("fsc_r{r:02}.csv")));
        assert_eq!(header, ["shell", "freq", "wavelength_px", "fsc"]);
        assert_eq!(rows.len(), shells);
        for (k, row) in rows.iter().enumerate() {
            assert_eq!(row[0], k.to_string());
            let v: f64 = row[3].parse().unwrap();
            assert!(v.is_nan() || (-1.0..=1.0).contains(&v));
        }
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(layout.eval().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["low_band_fsc"].as_array().unwrap().len(), 3);
    let index: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(layout.specvols().join("index.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(index["route"], "kernels");
    assert_eq!(index["files"].as_array().unwrap().len(), 3);
}

#[test]
fn reference_crc_agrees_with_a_known_value() {
    assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
}
