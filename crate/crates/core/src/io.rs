//! File formats: `.bin` scans, `.label` files, density dumps, key=value
//! configs, clip parameters and checkpoints. Binary data is little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::density::{DensityEmbedding, DENSITY_CHANNELS};
use crate::error::{Error, Result};
use crate::sensor::SensorConfig;
use crate::sim::LabeledCloud;
use crate::stats::ClipParams;
use crate::Point;

const SCAN_RECORD: usize = 16;
const CHECKPOINT_MAGIC: &str = "DDFE-CKPT v1";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn f32_at(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

/// Decodes `x y z intensity` f32 records, dropping intensity.
pub fn decode_scan(bytes: &[u8]) -> Result<Vec<Point>> {
    if !bytes.len().is_multiple_of(SCAN_RECORD) {
        let offset = (bytes.len() / SCAN_RECORD * SCAN_RECORD) as u64;
        return Err(Error::TruncatedRecord { offset });
    }
    Ok(bytes
        .chunks_exact(SCAN_RECORD)
        .map(|rec| [0, 4, 8].map(|o| f32_at(rec, o) as f64))
        .collect())
}

pub fn encode_scan(cloud: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * SCAN_RECORD);
    for p in cloud {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        out.extend_from_slice(&0f32.to_le_bytes());
    }
    out
}

pub fn read_scan(path: impl AsRef<Path>) -> Result<Vec<Point>> {
    let path = path.as_ref();
    decode_scan(&read_bytes(path)?).map_err(|e| match e {
        Error::TruncatedRecord { offset } => parse_err(path, 0, format!("truncated record at offset {offset}")),
        other => other,
    })
}

/// Coordinates are stored as f32; intensity is written as 0.
pub fn write_scan(cloud: &[Point], path: impl AsRef<Path>) -> Result<()> {
    write_all(path.as_ref(), &encode_scan(cloud))
}

/// Decodes u32 label words, keeping the low 16 bits as the class id.
pub fn decode_labels(bytes: &[u8], expected_n: usize) -> Result<Vec<u32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::TruncatedRecord {
            offset: (bytes.len() / 4 * 4) as u64,
        });
    }
    let found = bytes.len() / 4;
    if found != expected_n {
        return Err(Error::LabelCount {
            expected: expected_n,
            found,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|w| u32::from_le_bytes(w.try_into().expect("4-byte slice")) & 0xFFFF)
        .collect())
}

pub fn read_labels(path: impl AsRef<Path>, expected_n: usize) -> Result<Vec<u32>> {
    let path = path.as_ref();
    decode_labels(&read_bytes(path)?, expected_n).map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn write_labels(labels: &[u32], path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    write_all(path.as_ref(), &bytes)
}

/// `(line number, key, value)` triples from a `key=value` file. Blank lines
/// and `#` comments are skipped; duplicate keys are rejected.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(parse_err(path, line_no, format!("expected key=value, got {line:?}")));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(parse_err(path, line_no, "empty key"));
        }
        if out.iter().any(|(_, seen, _)| seen == k) {
            return Err(parse_err(path, line_no, format!("duplicate key {k:?}")));
        }
        out.push((line_no, k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: std::str::FromStr>(path: &Path, line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| parse_err(path, line, format!("{key}: {e} ({value:?})")))
}

pub fn parse_sensor_config(text: &str, path: &Path) -> Result<SensorConfig> {
    let mut name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sensor".into());
    let (mut h, mut v, mut lo, mut hi) = (None, None, None, None);
    for (line, key, value) in parse_key_values(text, path)? {
        match key.as_str() {
            "name" => name = value,
            "h_beams" => h = Some(parse_value::<usize>(path, line, &key, &value)?),
            "v_beams" => v = Some(parse_value::<usize>(path, line, &key, &value)?),
            "fov_min_deg" => lo = Some(parse_value::<f64>(path, line, &key, &value)?),
            "fov_max_deg" => hi = Some(parse_value::<f64>(path, line, &key, &value)?),
            _ => return Err(parse_err(path, line, format!("unknown key {key:?}"))),
        }
    }
    let missing = |k: &str| parse_err(path, 0, format!("missing key {k:?}"));
    SensorConfig::new(
        &name,
        h.ok_or_else(|| missing("h_beams"))?,
        v.ok_or_else(|| missing("v_beams"))?,
        lo.ok_or_else(|| missing("fov_min_deg"))?,
        hi.ok_or_else(|| missing("fov_max_deg"))?,
    )
}

pub fn read_sensor_config(path: impl AsRef<Path>) -> Result<SensorConfig> {
    let path = path.as_ref();
    parse_sensor_config(&read_text(path)?, path)
}

pub fn format_sensor_config(config: &SensorConfig) -> String {
    format!(
        "name={}\nh_beams={}\nv_beams={}\nfov_min_deg={}\nfov_max_deg={}\n",
        config.name, config.h_beams, config.v_beams, config.fov_min_deg, config.fov_max_deg
    )
}

/// N×4 row-major little-endian f32.
pub fn encode_density(embedding: &DensityEmbedding) -> Vec<u8> {
    embedding
        .values
        .iter()
        .flat_map(|row| row.iter().flat_map(|d| (*d as f32).to_le_bytes()))
        .collect()
}

pub fn decode_density(bytes: &[u8]) -> Result<Vec<[f32; DENSITY_CHANNELS]>> {
    let rec = 4 * DENSITY_CHANNELS;
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::TruncatedRecord {
            offset: (bytes.len() / rec * rec) as u64,
        });
    }
    Ok(bytes
        .chunks_exact(rec)
        .map(|r| std::array::from_fn(|k| f32_at(r, 4 * k)))
        .collect())
}

pub fn format_density_csv(embedding: &DensityEmbedding) -> String {
    let mut s = String::from("d10,d30,d50,d70\n");
    for row in &embedding.values {
        let cells: Vec<String> = row.iter().map(|d| d.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn write_density(embedding: &DensityEmbedding, path: impl AsRef<Path>, csv: bool) -> Result<()> {
    let bytes = if csv {
        format_density_csv(embedding).into_bytes()
    } else {
        encode_density(embedding)
    };
    write_all(path.as_ref(), &bytes)
}

/// One line per channel: `channel mid half_span`.
pub fn format_clip(clip: &ClipParams) -> String {
    let mut s = String::from("# channel mid half_span\n");
    for k in 0..DENSITY_CHANNELS {
        s.push_str(&format!("{k} {} {}\n", clip.mid[k], clip.half_span[k]));
    }
    s
}

pub fn parse_clip(text: &str, path: &Path) -> Result<ClipParams> {
    let mut mid = [f64::NAN; DENSITY_CHANNELS];
    let mut half = [f64::NAN; DENSITY_CHANNELS];
    let mut seen = [false; DENSITY_CHANNELS];
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(path, line_no, "expected `channel mid half_span`"));
        }
        let k: usize = parse_value(path, line_no, "channel", fields[0])?;
        if k >= DENSITY_CHANNELS || seen[k] {
            return Err(parse_err(path, line_no, format!("bad or repeated channel {k}")));
        }
        mid[k] = parse_value(path, line_no, "mid", fields[1])?;
        half[k] = parse_value(path, line_no, "half_span", fields[2])?;
        if !(half[k] > 0.0) || !mid[k].is_finite() || !half[k].is_finite() {
            return Err(parse_err(
                path,
                line_no,
                "clip parameters must be finite with positive half span",
            ));
        }
        seen[k] = true;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(parse_err(path, 0, format!("missing channel {k}")));
    }
    Ok(ClipParams::from_mid_half_span(mid, half))
}

pub fn write_clip(clip: &ClipParams, path: impl AsRef<Path>) -> Result<()> {
    write_all(path.as_ref(), format_clip(clip).as_bytes())
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<ClipParams> {
    let path = path.as_ref();
    parse_clip(&read_text(path)?, path)
}

/// Named f64 tensor stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("tensor name {name:?}")));
        }
        if shape.is_empty() || shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape(shape, &[values.len()]));
        }
        Ok(Self {
            name,
            shape: shape.to_vec(),
            values,
        })
    }
}

/// ASCII header (`DDFE-CKPT v1 <count>`, then `name d0 d1 ...` per tensor)
/// followed by the tensors' f64 values in header order.
pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = format!("{CHECKPOINT_MAGIC} {}\n", tensors.len()).into_bytes();
    for t in tensors {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        out.extend_from_slice(format!("{} {}\n", t.name, dims.join(" ")).as_bytes());
    }
    for t in tensors {
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<NamedTensor>> {
    let mut pos = 0usize;
    let mut next_line = |line_no: usize| -> Result<String> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(path, line_no, "unterminated header line"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| parse_err(path, line_no, "header is not ASCII"))?
            .to_string();
        pos += end + 1;
        Ok(line)
    };
    let first = next_line(1)?;
    let count: usize = first
        .strip_prefix(CHECKPOINT_MAGIC)
        .map(str::trim)
        .ok_or_else(|| parse_err(path, 1, "not a checkpoint"))
        .and_then(|c| parse_value(path, 1, "tensor count", c))?;
    let mut headers = Vec::with_capacity(count);
    for i in 0..count {
        let line_no = i + 2;
        let line = next_line(line_no)?;
        let mut fields = line.split_whitespace();
        let name = fields
            .next()
            .ok_or_else(|| parse_err(path, line_no, "missing tensor name"))?
            .to_string();
        let shape = fields
            .map(|d| parse_value::<usize>(path, line_no, "dimension", d))
            .collect::<Result<Vec<_>>>()?;
        if shape.is_empty() {
            return Err(parse_err(path, line_no, "tensor has no shape"));
        }
        headers.push((name, shape));
    }
    let mut offset = pos;
    let mut out = Vec::with_capacity(count);
    for (name, shape) in headers {
        let n: usize = shape.iter().product();
        let end = offset + 8 * n;
        if end > bytes.len() {
            let whole = (bytes.len() - offset) / 8 * 8 + offset;
            return Err(parse_err(
                path,
                0,
                format!("truncated record at offset {whole} in tensor {name}"),
            ));
        }
        let values = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte slice")))
            .collect();
        out.push(NamedTensor { name, shape, values });
        offset = end;
    }
    if offset != bytes.len() {
        return Err(parse_err(
            path,
            0,
            format!("{} trailing bytes at offset {offset}", bytes.len() - offset),
        ));
    }
    Ok(out)
}

pub fn write_checkpoint(tensors: &[NamedTensor], path: impl AsRef<Path>) -> Result<()> {
    write_all(path.as_ref(), &encode_checkpoint(tensors))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    let path = path.as_ref();
    decode_checkpoint(&read_bytes(path)?, path)
}

/// Writes `DIR/<stem>.bin` and `DIR/<stem>.label`.
pub fn write_labeled(dir: &Path, stem: &str, cloud: &LabeledCloud) -> Result<()> {
    write_scan(&cloud.points, dir.join(format!("{stem}.bin")))?;
    write_labels(&cloud.labels, dir.join(format!("{stem}.label")))
}

/// Reads a scan and the `.label` file next to it.
pub fn read_labeled(scan: &Path) -> Result<LabeledCloud> {
    let points = read_scan(scan)?;
    let labels = read_labels(scan.with_extension("label"), points.len())?;
    Ok(LabeledCloud { points, labels })
}

/// Every `*.bin` in `dir`, sorted by file name.
pub fn list_scans(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "bin") && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// All labeled scans of a directory, sorted by file name.
pub fn read_labeled_dir(dir: &Path) -> Result<Vec<LabeledCloud>> {
    let scans = list_scans(dir)?;
    if scans.is_empty() {
        return Err(parse_err(dir, 0, "no .bin scans found"));
    }
    scans.iter().map(|p| read_labeled(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("t")
    }

    #[test]
    fn scan_round_trip_bitwise() {
        let cloud = vec![
            [1.5, -2.25, 0.125],
            [100.0, 0.0, -1.73f32 as f64],
            [3.0e-3f32 as f64, 7.0, 8.0],
        ];
        let back = decode_scan(&encode_scan(&cloud)).unwrap();
        for (a, b) in cloud.iter().zip(&back) {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
        assert!(decode_scan(&[]).unwrap().is_empty());
    }

    #[test]
    fn scan_intensity_dropped() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.77] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(decode_scan(&bytes).unwrap(), vec![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn truncated_scan() {
        let err = decode_scan(&[0u8; 17]).unwrap_err();
        assert_eq!(err.to_string(), "truncated record at offset 16");
        let err = decode_scan(&[0u8; 5]).unwrap_err();
        assert_eq!(err.to_string(), "truncated record at offset 0");
    }

    #[test]
    fn label_masking_and_count() {
        let bytes = 0x0001_0002u32.to_le_bytes();
        assert_eq!(decode_labels(&bytes, 1).unwrap(), vec![2]);
        let err = decode_labels(&bytes, 2).unwrap_err().to_string();
        assert!(err.contains('1') && err.contains('2'), "{err}");
        assert!(decode_labels(&[0u8; 6], 1).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels: Vec<u32> = (0..10).collect();
        let lp = dir.path().join("a.label");
        write_labels(&labels, &lp).unwrap();
        assert_eq!(read_labels(&lp, 10).unwrap(), labels);
        let err = read_labels(&lp, 9).unwrap_err().to_string();
        assert!(
            err.contains("a.label") && err.contains("10") && err.contains('9'),
            "{err}"
        );

        let sp = dir.path().join("a.bin");
        write_scan(&[[1.0, 2.0, 3.0]], &sp).unwrap();
        assert_eq!(fs::metadata(&sp).unwrap().len(), 16);
        assert_eq!(read_scan(&sp).unwrap(), vec![[1.0, 2.0, 3.0]]);
        let err = read_scan(dir.path().join("missing.bin")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn labeled_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_labeled_dir(dir.path()).is_err());
        let a = LabeledCloud {
            points: vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]],
            labels: vec![1, 3],
        };
        let b = LabeledCloud {
            points: vec![[0.5, 0.5, 0.5]],
            labels: vec![2],
        };
        write_labeled(dir.path(), "001", &b).unwrap();
        write_labeled(dir.path(), "000", &a).unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        assert_eq!(read_labeled_dir(dir.path()).unwrap(), vec![a, b]);
        fs::remove_file(dir.path().join("001.label")).unwrap();
        let err = read_labeled_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains("001.label"), "{err}");
    }

    #[test]
    fn sensor_config_file() {
        let text = "# test\nv_beams = 32\nh_beams=1080\nfov_max_deg=10 # top\nfov_min_deg=-30\nname=nuscenes\n";
        let cfg = parse_sensor_config(text, p()).unwrap();
        assert_eq!(cfg, SensorConfig::nuscenes());
        assert_eq!(parse_sensor_config(&format_sensor_config(&cfg), p()).unwrap(), cfg);

        let err = parse_sensor_config("h_beams=10\nv_beams=x\n", p())
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("t:2:"), "{err}");
        let err = parse_sensor_config("h_beams=10\nh_beams=11\n", p())
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("t:2:") && err.contains("duplicate"), "{err}");
        assert!(parse_sensor_config("h_beams=10\n", p()).is_err());
        assert!(parse_sensor_config("bogus line\n", p()).is_err());
        assert!(parse_sensor_config("colour=red\n", p()).is_err());
    }

    #[test]
    fn density_formats() {
        let emb = DensityEmbedding {
            values: vec![[0.5, 0.25, 0.125, 1.0], [2.0, 3.0, 4.0, 5.0]],
        };
        let bytes = encode_density(&emb);
        assert_eq!(bytes.len(), 32);
        assert_eq!(decode_density(&bytes).unwrap()[1], [2.0, 3.0, 4.0, 5.0]);
        assert!(decode_density(&bytes[..20]).is_err());
        let csv = format_density_csv(&emb);
        assert_eq!(csv.lines().next(), Some("d10,d30,d50,d70"));
        assert_eq!(csv.lines().nth(1), Some("0.5,0.25,0.125,1"));
    }

    #[test]
    fn clip_round_trip() {
        let clip = ClipParams::from_mid_half_span([0.1, 0.2, 1.0 / 3.0, 4.0], [1e-8, 0.5, 0.7, 0.1 + 0.2]);
        let back = parse_clip(&format_clip(&clip), p()).unwrap();
        assert_eq!(back.mid, clip.mid);
        assert_eq!(back.half_span, clip.half_span);
        assert!(parse_clip("0 1 1\n1 1 1\n2 1 1\n", p()).is_err());
        let err = parse_clip("0 1 1\n0 1 1\n", p()).unwrap_err().to_string();
        assert!(err.starts_with("t:2:"), "{err}");
        assert!(parse_clip("0 1 0\n1 1 1\n2 1 1\n3 1 1\n", p()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let tensors = vec![
            NamedTensor::new("w", &[2, 3], vec![0.1, -0.2, 1e-300, f64::MAX, -0.0, 7.0]).unwrap(),
            NamedTensor::new("clip.m", &[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        ];
        let bytes = encode_checkpoint(&tensors);
        let back = decode_checkpoint(&bytes, p()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in tensors.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits = |t: &NamedTensor| t.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let err = decode_checkpoint(&bytes[..bytes.len() - 3], p())
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("truncated record at offset") && err.contains("clip.m"),
            "{err}"
        );
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, p()).is_err());
        assert!(decode_checkpoint(b"garbage\n", p()).is_err());
        assert!(NamedTensor::new("x", &[3], vec![1.0]).is_err());
        assert!(NamedTensor::new("a b", &[1], vec![1.0]).is_err());
    }
}
