use super::{Gray8, HuSlice, HU_MIN};
use crate::error::{Error, Result};
use image::{DynamicImage, ImageFormat, ImageReader};
use std::io::Write;
use std::path::{Path, PathBuf};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Sidecar text next to an image: `<stem>.txt`.
pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("txt")
}

/// `key = value` metadata; only `subject_id` is required for HU slices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Sidecar {
    pub subject_id: Option<String>,
    pub label: Option<String>,
    pub split: Option<String>,
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut s = Sidecar::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Validation(format!(
                "{}:{}: expected `key = value`",
                path.display(),
                n + 1
            )));
        };
        let v = v.trim().to_string();
        match k.trim() {
            "subject_id" => s.subject_id = Some(v),
            "label" => s.label = Some(v),
            "split" => s.split = Some(v),
            other => {
                return Err(Error::Validation(format!(
                    "{}:{}: unknown key `{other}`",
                    path.display(),
                    n + 1
                )));
            }
        }
    }
    Ok(s)
}

/// Reads a 16-bit binary PGM holding `hu + 1024` plus its sidecar.
pub fn read_hu_pgm(path: &Path) -> Result<HuSlice> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(image_err(path, "expected a 16-bit single-channel PGM"));
    };
    let side = sidecar_path(path);
    let meta = read_sidecar(&side)?;
    let subject_id = meta
        .subject_id
        .ok_or_else(|| Error::Validation(format!("{}: missing subject_id", side.display())))?;
    Ok(HuSlice {
        height: buf.height() as usize,
        width: buf.width() as usize,
        values: buf.pixels().map(|p| p.0[0] as i32 + HU_MIN).collect(),
        source_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        subject_id,
    })
}

/// Writes `slice` as a 16-bit PGM (values offset by 1024, clamped to the
/// format range) and a sidecar with its subject id.
pub fn write_hu_pgm(path: &Path, slice: &HuSlice) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", slice.width, slice.height).into_bytes();
    for &v in &slice.values {
        out.extend_from_slice(&((v - HU_MIN).clamp(0, 65535) as u16).to_be_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let mut f = std::fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
    writeln!(f, "subject_id = {}", slice.subject_id).map_err(|e| Error::io(&side, e))
}

pub fn read_gray_png(path: &Path) -> Result<Gray8> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let DynamicImage::ImageLuma8(buf) = img else {
        return Err(image_err(path, "expected an 8-bit grayscale image"));
    };
    Gray8::new(buf.height() as usize, buf.width() as usize, buf.into_raw())
}

pub fn write_gray_png(path: &Path, img: &Gray8) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| image_err(path, "pixel buffer does not match dimensions"))?;
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = HuSlice {
            height: 2,
            width: 3,
            values: vec![-1024, 0, 3071, -2000, 40, 35],
            source_id: "a".into(),
            subject_id: "P7".into(),
        };
        let p = dir.path().join("a.pgm");
        write_hu_pgm(&p, &s).unwrap();
        let r = read_hu_pgm(&p).unwrap();
        assert_eq!(r.values, [-1024, 0, 3071, -1024, 40, 35]);
        assert_eq!(r.subject_id, "P7");
        let g = Gray8::new(2, 2, vec![0, 64, 128, 255]).unwrap();
        let q = dir.path().join("g.png");
        write_gray_png(&q, &g).unwrap();
        assert_eq!(read_gray_png(&q).unwrap(), g);
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_gray_png(Path::new("/no/such/img.png")).unwrap_err();
        assert!(err.to_string().contains("/no/such/img.png"), "{err}");
    }
}
