//! CSV manifests, binary PNM images and the on-disk dataset layout.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use super::synthetic::SyntheticDataset;
use super::transforms::resize_bilinear;
use super::ReidSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const REQUIRED_COLUMNS: [&str; 3] = ["path", "identity", "camera"];

/// Decodes a binary PPM (`P6`) or PGM (`P5`) into `[3,H,W]` values in
/// `[0,1]`. Gray images are replicated across channels.
pub fn decode_pnm(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let magic = bytes.get(..2).unwrap_or_default();
    if magic != b"P6" && magic != b"P5" {
        return Err(Error::format(
            origin,
            format!("unsupported image magic {:?}; expected binary P6 or P5", String::from_utf8_lossy(magic)),
        ));
    }
    let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
        .map_err(|e| Error::format(origin, e.to_string()))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    }))
}

/// Loads an image, resizing to `size × size` when given.
pub fn load_image(path: &Path, size: Option<usize>) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = decode_pnm(&bytes, path)?;
    match size {
        Some(s) => resize_bilinear(&img, s, s),
        None => Ok(img),
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_pnm(path: &Path, width: usize, height: usize, bytes: &[u8], subtype: PnmSubtype) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let color = match subtype {
        PnmSubtype::Graymap(_) => ExtendedColorType::L8,
        _ => ExtendedColorType::Rgb8,
    };
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|e| Error::format(path, e.to_string()))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes interleaved RGB bytes as binary PPM.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    encode_pnm(path, width, height, rgb, PnmSubtype::Pixmap(SampleEncoding::Binary))
}

/// Writes gray bytes as binary PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    encode_pnm(path, width, height, gray, PnmSubtype::Graymap(SampleEncoding::Binary))
}

/// Writes a `[3,H,W]` tensor as an 8-bit PPM.
pub fn save_image_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = img.dims3("save_image_ppm")?;
    if c != 3 {
        return Err(Error::shape("save_image_ppm", format!("expected 3 channels, got {c}")));
    }
    let d = img.data();
    let rgb: Vec<u8> = (0..h * w).flat_map(|p| (0..3).map(move |ch| to_u8(d[ch * h * w + p]))).collect();
    write_ppm(path, w, h, &rgb)
}

fn parse_field(path: &Path, line: u64, column: &str, raw: &str) -> Result<usize> {
    raw.trim().parse().map_err(|_| {
        Error::format(path, format!("line {line}: column `{column}` expects a non-negative integer, got {raw:?}"))
    })
}

/// Reads a manifest with header `path,identity,camera[,track]`. Image paths
/// are relative to the manifest's directory. An empty `track` cell means
/// the sample has no track.
pub fn load_manifest(path: &Path, size: Option<usize>) -> Result<Vec<ReidSample>> {
    let root = path.parent().unwrap_or(Path::new(""));
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    for (i, expected) in REQUIRED_COLUMNS.iter().enumerate() {
        match header.get(i) {
            Some(found) if found == *expected => {}
            Some(found) => {
                return Err(Error::format(path, format!("header column {} is `{found}`, expected `{expected}`", i + 1)))
            }
            None => return Err(Error::format(path, format!("header is missing column `{expected}`"))),
        }
    }
    let has_track = match header.get(3) {
        None => false,
        Some("track") if header.len() == 4 => true,
        Some(found) if found != "track" => {
            return Err(Error::format(path, format!("header column 4 is `{found}`, expected `track`")))
        }
        Some(_) => {
            let extra = header.get(4).unwrap_or_default();
            return Err(Error::format(path, format!("unexpected header column `{extra}`")));
        }
    };

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let name = record.get(0).unwrap_or_default().to_string();
        let identity = parse_field(path, line, "identity", record.get(1).unwrap_or_default())?;
        let camera = parse_field(path, line, "camera", record.get(2).unwrap_or_default())?;
        let track = match record.get(3).filter(|t| has_track && !t.is_empty()) {
            Some(raw) => Some(parse_field(path, line, "track", raw)?),
            None => None,
        };
        let image = load_image(&root.join(&name), size)?;
        samples.push(ReidSample { name, image, identity, camera, track });
    }
    Ok(samples)
}

/// Writes the label columns of `samples`. The `track` column is emitted
/// whenever any sample has a track.
pub fn save_manifest(path: &Path, samples: &[ReidSample]) -> Result<()> {
    let with_track = samples.iter().any(|s| s.track.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    if with_track {
        w.write_record(["path", "identity", "camera", "track"]).map_err(csv_err)?;
    } else {
        w.write_record(REQUIRED_COLUMNS).map_err(csv_err)?;
    }
    for s in samples {
        let mut row = vec![s.name.clone(), s.identity.to_string(), s.camera.to_string()];
        if with_track {
            row.push(s.track.map(|t| t.to_string()).unwrap_or_default());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `images/*.ppm`, `train.csv`, `query.csv`, `gallery.csv` and
/// `landmarks.csv` under `root`. Returns the three manifest paths.
pub fn write_dataset_layout(root: &Path, dataset: &SyntheticDataset) -> Result<[PathBuf; 3]> {
    fs::create_dir_all(root.join("images")).map_err(|e| Error::io(root.join("images"), e))?;
    for s in dataset.all_samples() {
        save_image_ppm(&root.join(&s.name), &s.image)?;
    }
    let manifests = [root.join("train.csv"), root.join("query.csv"), root.join("gallery.csv")];
    save_manifest(&manifests[0], &dataset.train)?;
    save_manifest(&manifests[1], &dataset.query)?;
    save_manifest(&manifests[2], &dataset.gallery)?;

    let lm_path = root.join("landmarks.csv");
    let mut w = csv::Writer::from_path(&lm_path).map_err(|e| Error::format(&lm_path, e.to_string()))?;
    for lm in &dataset.landmarks {
        w.serialize(lm).map_err(|e| Error::format(&lm_path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&lm_path, e))?;
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_pixel_scales_to_unit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("red.ppm");
        write_ppm(&p, 1, 1, &[255, 0, 0]).unwrap();
        let t = load_image(&p, None).unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn gray_replicates_channels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        write_pgm(&p, 2, 1, &[0, 51]).unwrap();
        let t = load_image(&p, None).unwrap();
        assert_eq!(t.data(), &[0.0, 0.2, 0.0, 0.2, 0.0, 0.2]);
    }

    #[test]
    fn rejects_ascii_and_foreign_magic() {
        for bytes in [&b"P3\n1 1\n255\n255 0 0\n"[..], b"\x89PNG", b""] {
            let err = decode_pnm(bytes, Path::new("x")).unwrap_err();
            assert!(err.to_string().contains("unsupported image magic"), "{err}");
        }
    }

    #[test]
    fn header_errors_name_the_column() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("path,ident,camera\n", "`ident`"),
            ("path,identity\n", "`camera`"),
            ("path,identity,camera,trk\n", "`trk`"),
            ("file,identity,camera\n", "`file`"),
        ];
        for (header, needle) in cases {
            let p = dir.path().join("m.csv");
            fs::write(&p, header).unwrap();
            let err = load_manifest(&p, None).unwrap_err().to_string();
            assert!(err.contains(needle), "{err}");
        }
    }

    #[test]
    fn missing_image_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "path,identity,camera\nnope.ppm,0,0\n").unwrap();
        let err = load_manifest(&p, None).unwrap_err().to_string();
        assert!(err.contains("nope.ppm"), "{err}");
    }
}
