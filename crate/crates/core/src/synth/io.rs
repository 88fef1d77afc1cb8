//! Dataset files: one tab-separated record per sample plus one binary image
//! file per sample (8-byte header `H, W` as little-endian u32, then `H * W`
//! little-endian f32 pixels, row-major).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ImageGrid, LatentFindings, Sample};
use crate::error::{Error, Result};

pub const DATASET_FILE: &str = "dataset.tsv";
const IMAGE_DIR: &str = "images";

pub fn write_image(path: &Path, image: &ImageGrid) -> Result<()> {
    let n = image.size as u32;
    let mut bytes = Vec::with_capacity(8 + 4 * image.pixels.len());
    bytes.extend_from_slice(&n.to_le_bytes());
    bytes.extend_from_slice(&n.to_le_bytes());
    for &p in &image.pixels {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<ImageGrid> {
    let bytes = fs::read(path)?;
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 8 {
        return Err(bad("missing header"));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if h != w {
        return Err(bad("only square images are supported"));
    }
    if bytes.len() != 8 + 4 * h * w {
        return Err(bad("payload length does not match header"));
    }
    let pixels = bytes[8..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(ImageGrid { size: h, pixels })
}

/// Writes `dataset.tsv` and `images/<id>.img` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    let mut w = BufWriter::new(fs::File::create(dir.join(DATASET_FILE))?);
    for s in samples {
        if s.report.contains(['\t', '\n']) {
            return Err(Error::Config(format!("report of sample {} contains a tab or newline", s.id)));
        }
        let rel = format!("{IMAGE_DIR}/{}.img", s.id);
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            s.id,
            s.language,
            s.findings.to_bitstring(),
            s.report,
            rel
        )?;
        write_image(&dir.join(&rel), &s.image)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(DATASET_FILE);
    let reader = BufReader::new(fs::File::open(&path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Format {
            path: path.clone(),
            detail: format!("line {}: {detail}", n + 1),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", cols.len())));
        }
        let id = cols[0].parse().map_err(|_| bad(format!("bad id {:?}", cols[0])))?;
        let language = cols[1].parse().map_err(|e: Error| bad(e.to_string()))?;
        let findings =
            LatentFindings::parse_bitstring(cols[2]).map_err(|e| bad(e.to_string()))?;
        let image = read_image(&dir.join(cols[4]))?;
        out.push(Sample {
            id,
            language,
            findings,
            report: cols[3].to_string(),
            image,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no records", path.display())));
    }
    Ok(out)
}
