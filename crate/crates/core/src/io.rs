//! File formats: Middlebury `.flo`, trajectory text, PNG frames, run
//! manifests. Every writer goes through [`write_atomic`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{Frame, FlowField, Trajectory, TrajectorySet, TRACK_LEN};

const FLO_MAGIC: [u8; 4] = *b"PIEH";

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a file, mapping a missing path to [`Error::MissingInput`].
pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_input(path)?)
        .map_err(|_| Error::parse(path.display().to_string(), 0, "file is not UTF-8"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (w, h) = flow.dims();
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(&FLO_MAGIC);
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4-byte slice");
    if magic != FLO_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice")) as i64;
    let h = i32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice")) as i64;
    if w <= 0 || h <= 0 {
        return Err(Error::BadDimensions { width: w, height: h });
    }
    let n = (w * h) as usize;
    let expected = 12 + 8 * n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for c in bytes[12..expected].chunks_exact(8) {
        u.push(f32::from_le_bytes(c[..4].try_into().expect("4-byte slice")));
        v.push(f32::from_le_bytes(c[4..].try_into().expect("4-byte slice")));
    }
    FlowField::from_planes(w as usize, h as usize, u, v)
}

pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    write_atomic(path, &encode_flo(flow))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&read_input(path)?)
}

const TRACKS_HEADER: &str = "# motion-refine tracks v1";

fn bits(b: &[bool; TRACK_LEN]) -> String {
    b.iter().map(|&v| if v { '1' } else { '0' }).collect()
}

/// One track per line: `query x0 y0 … x7 y7 valid visible`, where the last
/// two fields are 8-character 0/1 strings.
pub fn tracks_to_text(set: &TrajectorySet) -> String {
    let mut s = format!(
        "{TRACKS_HEADER}\n# clip {} width {} height {}\n",
        set.clip, set.width, set.height
    );
    for tr in &set.trajectories {
        let _ = write!(s, "{}", tr.query_index);
        for p in &tr.points {
            let _ = write!(s, " {:?} {:?}", p[0], p[1]);
        }
        let _ = writeln!(s, " {} {}", bits(&tr.valid), bits(&tr.visible));
    }
    s
}

pub fn tracks_from_text(text: &str, origin: &str) -> Result<TrajectorySet> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == TRACKS_HEADER => {}
        _ => return Err(Error::parse(origin, 1, format!("expected `{TRACKS_HEADER}`"))),
    }
    let (n, meta) = lines
        .next()
        .ok_or_else(|| Error::parse(origin, 2, "missing clip line"))?;
    let f: Vec<&str> = meta.split_whitespace().collect();
    if f.len() != 7 || f[0] != "#" || f[1] != "clip" || f[3] != "width" || f[5] != "height" {
        return Err(Error::parse(origin, n + 1, "expected `# clip ID width W height H`"));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(origin, n + 1, format!("bad dimension `{s}`")));
    let mut set = TrajectorySet {
        clip: f[2].to_string(),
        width: dim(f[4])?,
        height: dim(f[6])?,
        trajectories: Vec::new(),
    };
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 + 2 * TRACK_LEN {
            return Err(Error::parse(origin, i + 1, format!("expected {} fields", 3 + 2 * TRACK_LEN)));
        }
        let query_index: usize = f[0]
            .parse()
            .ok()
            .filter(|&q| q < TRACK_LEN)
            .ok_or_else(|| Error::parse(origin, i + 1, "bad query index"))?;
        let mut points = [[0.0; 2]; TRACK_LEN];
        for (t, p) in points.iter_mut().enumerate() {
            for c in 0..2 {
                let v: f64 = f[1 + 2 * t + c]
                    .parse()
                    .map_err(|_| Error::parse(origin, i + 1, format!("bad coordinate `{}`", f[1 + 2 * t + c])))?;
                if !v.is_finite() {
                    return Err(Error::parse(origin, i + 1, "non-finite coordinate"));
                }
                p[c] = v;
            }
        }
        let flags = |s: &str| -> Result<[bool; TRACK_LEN]> {
            let b: Vec<bool> = s
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(Error::parse(origin, i + 1, format!("bad flag string `{s}`"))),
                })
                .collect::<Result<_>>()?;
            b.try_into().map_err(|_| Error::parse(origin, i + 1, format!("flag string `{s}` needs {TRACK_LEN} digits")))
        };
        set.trajectories.push(Trajectory {
            points,
            valid: flags(f[1 + 2 * TRACK_LEN])?,
            visible: flags(f[2 + 2 * TRACK_LEN])?,
            query_index,
        });
    }
    Ok(set)
}

pub fn write_tracks(set: &TrajectorySet, path: &Path) -> Result<()> {
    write_atomic(path, tracks_to_text(set).as_bytes())
}

pub fn read_tracks(path: &Path) -> Result<TrajectorySet> {
    tracks_from_text(&read_text(path)?, &path.display().to_string())
}

/// 16-bit RGB PNG with `v ↦ round((v + 0.5) · 65535)`.
pub fn encode_png(frame: &Frame) -> Result<Vec<u8>> {
    let (w, h) = frame.dims();
    let data: Vec<u16> = frame
        .data()
        .iter()
        .map(|&v| ((v.clamp(-0.5, 0.5) as f64 + 0.5) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
    let mut out = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageRgb16(img).write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Decodes 8- or 16-bit PNGs into `[-0.5, 0.5]` colors. Gray and alpha
/// channels are converted to RGB.
pub fn decode_png(bytes: &[u8], time_index: usize) -> Result<Frame> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen = matches!(
        img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    let data: Vec<f32> = if sixteen {
        img.to_rgb16().into_raw().iter().map(|&v| (v as f64 / 65535.0 - 0.5) as f32).collect()
    } else {
        img.to_rgb8().into_raw().iter().map(|&v| (v as f64 / 255.0 - 0.5) as f32).collect()
    };
    Frame::new(w, h, data, time_index)
}

pub fn write_png(frame: &Frame, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(frame)?)
}

pub fn read_png(path: &Path, time_index: usize) -> Result<Frame> {
    decode_png(&read_input(path)?, time_index)
}

/// Writes an 8-bit RGB image.
pub fn write_rgb8_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    write_atomic(path, &out.into_inner())
}

const MANIFEST_HEADER: &str = "# motion-refine manifest v1";

/// Record of one run: command, configuration hash, seeds and the digest of
/// every artifact, keyed by path relative to the output directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Manifest {
            command: command.into(),
            config_hash: config_hash.into(),
            ..Manifest::default()
        }
    }

    /// Writes an artifact under `root` and records its digest.
    pub fn write_artifact(&mut self, root: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&root.join(rel), bytes)?;
        self.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MANIFEST_HEADER}\ncommand={}\nconfig_hash={}\n",
            self.command, self.config_hash
        );
        for (k, v) in &self.seeds {
            let _ = writeln!(s, "seed {k} {v}");
        }
        for (k, v) in &self.artifacts {
            let _ = writeln!(s, "artifact {v} {k}");
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l.trim()) != Some(MANIFEST_HEADER) {
            return Err(Error::parse(origin, 1, format!("expected `{MANIFEST_HEADER}`")));
        }
        let mut m = Manifest::default();
        for (i, line) in lines {
            let bad = || Error::parse(origin, i + 1, format!("unrecognized manifest line `{line}`"));
            if let Some(v) = line.strip_prefix("command=") {
                m.command = v.to_string();
            } else if let Some(v) = line.strip_prefix("config_hash=") {
                m.config_hash = v.to_string();
            } else if let Some(rest) = line.strip_prefix("seed ") {
                let (k, v) = rest.rsplit_once(' ').ok_or_else(bad)?;
                m.seeds.insert(k.to_string(), v.parse().map_err(|_| bad())?);
            } else if let Some(rest) = line.strip_prefix("artifact ") {
                let (digest, path) = rest.split_once(' ').ok_or_else(bad)?;
                m.artifacts.insert(path.to_string(), digest.to_string());
            } else if !line.trim().is_empty() {
                return Err(bad());
            }
        }
        Ok(m)
    }

    /// Paths whose current content under `root` differs from the recorded
    /// digest, or which are missing.
    pub fn verify(&self, root: &Path) -> Vec<String> {
        self.artifacts
            .iter()
            .filter(|(rel, digest)| fs::read(root.join(rel)).map(|b| sha256_hex(&b) != **digest).unwrap_or(true))
            .map(|(rel, _)| rel.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flo_fixture_layout() {
        let flow = FlowField::from_planes(2, 1, vec![1.5, 0.0], vec![-2.0, 0.0]).unwrap();
        let bytes = encode_flo(&flow);
        assert_eq!(bytes.len(), 28);
        assert_eq!(
            hex::encode(&bytes),
            "50494548020000000100000000 00c03f000000c00000000000000000".replace(' ', "")
        );
        assert_eq!(decode_flo(&bytes).unwrap(), flow);
    }

    #[test]
    fn flo_errors() {
        let mut bytes = encode_flo(&FlowField::zeros(2, 2));
        assert!(matches!(decode_flo(&bytes[..20]), Err(Error::Truncated { .. })));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_flo(&bytes), Err(Error::BadMagic(_))));
        let mut zero = encode_flo(&FlowField::zeros(1, 1));
        zero[4..8].copy_from_slice(&0i32.to_le_bytes());
        assert!(matches!(decode_flo(&zero), Err(Error::BadDimensions { .. })));
    }

    #[test]
    fn tracks_round_trip() {
        let mut t = Trajectory::stationary([1.25, 3.0]);
        t.points[3] = [0.1, 1e-7];
        t.visible[2] = false;
        t.valid[7] = false;
        t.query_index = 1;
        let set = TrajectorySet {
            clip: "c".into(),
            width: 10,
            height: 8,
            trajectories: vec![t],
        };
        let back = tracks_from_text(&tracks_to_text(&set), "mem").unwrap();
        assert_eq!(back, set);
        assert!(tracks_from_text("# motion-refine tracks v1\n# clip c width 1 height 1\n0 1 2\n", "mem").is_err());
    }

    #[test]
    fn png_sixteen_bit_round_trip_is_close() {
        let f = Frame::from_fn(5, 3, 0, |x, y| [x as f32 / 10.0 - 0.2, y as f32 / 8.0 - 0.1, 0.5]);
        let back = decode_png(&encode_png(&f).unwrap(), 0).unwrap();
        for (a, b) in f.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }

    #[test]
    fn eight_bit_png_maps_to_centered_range() {
        let img = image::RgbImage::from_raw(1, 1, vec![0, 255, 51]).unwrap();
        let mut bytes = std::io::Cursor::new(Vec::new());
        img.write_to(&mut bytes, image::ImageFormat::Png).unwrap();
        let f = decode_png(&bytes.into_inner(), 0).unwrap();
        assert_eq!(f.pixel(0, 0), [-0.5, 0.5, -0.3]);
    }

    #[test]
    fn manifest_round_trip_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new("synth", "abc");
        m.seeds.insert("corpus".into(), 7);
        m.write_artifact(dir.path(), "a/b.txt", b"hello").unwrap();
        assert!(m.verify(dir.path()).is_empty());
        assert_eq!(Manifest::from_text(&m.to_text(), "mem").unwrap(), m);
        std::fs::write(dir.path().join("a/b.txt"), b"changed").unwrap();
        assert_eq!(m.verify(dir.path()), vec!["a/b.txt".to_string()]);
    }
}
