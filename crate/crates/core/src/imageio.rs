//! Image buffers, binary PPM (P6) loading/saving and corpus manifests.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// 8-bit RGB image stored as three separate color planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// R, G, B planes, row-major, `width * height` samples each.
    pub planes: [Vec<u8>; 3],
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        let plane = vec![0u8; width * height];
        ImageBuffer {
            width,
            height,
            planes: [plane.clone(), plane.clone(), plane],
        }
    }

    /// Constant-valued image, all three planes set to `value`.
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        let plane = vec![value; width * height];
        ImageBuffer {
            width,
            height,
            planes: [plane.clone(), plane.clone(), plane],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, plane: usize, x: usize, y: usize) -> u8 {
        self.planes[plane][y * self.width + x]
    }

    pub fn set(&mut self, plane: usize, x: usize, y: usize, value: u8) {
        self.planes[plane][y * self.width + x] = value;
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PpmError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a binary PPM (expected magic P6, got {found:?})")]
    BadMagic { path: PathBuf, found: String },
    #[error("{path}: malformed header: {what}")]
    MalformedHeader { path: PathBuf, what: String },
    #[error("{path}: unsupported maxval {maxval} (only 255 is supported)")]
    UnsupportedMaxval { path: PathBuf, maxval: u32 },
    #[error("{path}: truncated payload: expected {expected} bytes, got {got}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
}

/// Loads a binary (P6) portable pixmap with maxval 255.
pub fn load_ppm(path: &Path) -> Result<ImageBuffer, PpmError> {
    let data = fs::read(path).map_err(|source| PpmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_ppm(&data, path)
}

fn parse_ppm(data: &[u8], path: &Path) -> Result<ImageBuffer, PpmError> {
    let mut pos = 0usize;
    let magic = take_token(data, &mut pos).ok_or_else(|| PpmError::MalformedHeader {
        path: path.to_path_buf(),
        what: "missing magic".into(),
    })?;
    if magic != b"P6" {
        return Err(PpmError::BadMagic {
            path: path.to_path_buf(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        let tok = take_token(data, &mut pos).ok_or_else(|| PpmError::MalformedHeader {
            path: path.to_path_buf(),
            what: "missing width/height/maxval".into(),
        })?;
        *field = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PpmError::MalformedHeader {
                path: path.to_path_buf(),
                what: format!("non-numeric field {:?}", String::from_utf8_lossy(tok)),
            })?;
    }
    let (width, height, maxval) = (fields[0] as usize, fields[1] as usize, fields[2]);
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval {
            path: path.to_path_buf(),
            maxval,
        });
    }
    if width == 0 || height == 0 {
        return Err(PpmError::MalformedHeader {
            path: path.to_path_buf(),
            what: "zero dimension".into(),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let expected = width * height * 3;
    let payload = data.get(pos..pos + expected).ok_or(PpmError::Truncated {
        path: path.to_path_buf(),
        expected,
        got: data.len().saturating_sub(pos),
    })?;
    let mut img = ImageBuffer::new(width, height);
    for (i, rgb) in payload.chunks_exact(3).enumerate() {
        img.planes[0][i] = rgb[0];
        img.planes[1][i] = rgb[1];
        img.planes[2][i] = rgb[2];
    }
    Ok(img)
}

/// Skips whitespace and `#` comments, then returns the next header token.
fn take_token<'a>(data: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(&data[start..*pos])
    } else {
        None
    }
}

/// Writes a canonical binary PPM (`P6\n<w> <h>\n255\n` + interleaved RGB).
pub fn save_ppm(img: &ImageBuffer, path: &Path) -> Result<(), PpmError> {
    let mut out = Vec::with_capacity(img.pixel_count() * 3 + 32);
    write!(out, "P6\n{} {}\n255\n", img.width, img.height).expect("vec write");
    for i in 0..img.pixel_count() {
        out.push(img.planes[0][i]);
        out.push(img.planes[1][i]);
        out.push(img.planes[2][i]);
    }
    fs::write(path, out).map_err(|source| PpmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Which half of the corpus an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Calibration,
    Evaluation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Calibration => write!(f, "calibration"),
            Split::Evaluation => write!(f, "evaluation"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub name: String,
    pub path: PathBuf,
    pub split: Split,
}

/// Named image list split into disjoint calibration and evaluation halves,
/// ordered lexicographically by name.
#[derive(Debug, Clone)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest parse error in {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate corpus entry name {0:?}")]
    DuplicateName(String),
}

impl Corpus {
    pub fn new(mut entries: Vec<CorpusEntry>) -> Result<Self, CorpusError> {
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        for pair in entries.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(CorpusError::DuplicateName(pair[0].name.clone()));
            }
        }
        Ok(Corpus { entries })
    }

    /// Reads a manifest: JSON list of `{name, path, split}`. Relative paths
    /// are resolved against the manifest's directory.
    pub fn load_manifest(path: &Path) -> Result<Self, CorpusError> {
        let mut file = fs::File::open(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut text = String::new();
        file.read_to_string(&mut text)
            .map_err(|source| CorpusError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let mut entries: Vec<CorpusEntry> =
            serde_json::from_str(&text).map_err(|source| CorpusError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        Corpus::new(entries)
    }

    pub fn save_manifest(&self, path: &Path) -> Result<(), CorpusError> {
        let text = serde_json::to_string_pretty(&self.entries).expect("serialize manifest");
        fs::write(path, text).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn calibration(&self) -> Vec<&CorpusEntry> {
        self.split(Split::Calibration).collect()
    }

    pub fn evaluation(&self) -> Vec<&CorpusEntry> {
        self.split(Split::Evaluation).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let mut img = ImageBuffer::new(7, 5);
        for p in 0..3 {
            for i in 0..img.pixel_count() {
                img.planes[p][i] = ((i * 13 + p * 71) % 256) as u8;
            }
        }
        save_ppm(&img, &path).unwrap();
        let back = load_ppm(&path).unwrap();
        assert_eq!(img, back);
        // Saving the loaded image reproduces the exact bytes.
        let path2 = dir.path().join("img2.ppm");
        save_ppm(&back, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn loads_kodak_sized_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kodak.ppm");
        let img = ImageBuffer::filled(768, 512, 90);
        save_ppm(&img, &path).unwrap();
        let back = load_ppm(&path).unwrap();
        assert_eq!((back.width, back.height), (768, 512));
    }

    #[test]
    fn rejects_wide_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.ppm");
        fs::write(&path, b"P6\n2 2\n65535\n0123456789ab").unwrap();
        match load_ppm(&path) {
            Err(PpmError::UnsupportedMaxval { maxval, .. }) => assert_eq!(maxval, 65535),
            other => panic!("expected maxval error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ppm");
        fs::write(&path, b"P6\n4 4\n255\nshort").unwrap();
        assert!(matches!(
            load_ppm(&path),
            Err(PpmError::Truncated { expected: 48, .. })
        ));
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ascii.ppm");
        fs::write(&path, b"P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(matches!(load_ppm(&path), Err(PpmError::BadMagic { .. })));
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("comment.ppm");
        fs::write(&path, b"P6\n# made by hand\n1 1\n255\nabc").unwrap();
        let img = load_ppm(&path).unwrap();
        assert_eq!((img.width, img.height), (1, 1));
        assert_eq!(
            [img.planes[0][0], img.planes[1][0], img.planes[2][0]],
            [b'a', b'b', b'c']
        );
    }

    #[test]
    fn corpus_orders_by_name_and_splits() {
        let entries = vec![
            CorpusEntry {
                name: "b".into(),
                path: "b.ppm".into(),
                split: Split::Evaluation,
            },
            CorpusEntry {
                name: "a".into(),
                path: "a.ppm".into(),
                split: Split::Calibration,
            },
        ];
        let corpus = Corpus::new(entries).unwrap();
        assert_eq!(corpus.entries()[0].name, "a");
        assert_eq!(corpus.calibration().len(), 1);
        assert_eq!(corpus.evaluation().len(), 1);
    }
}
