//! Filesystem access to the core byte formats and PPM export.

use std::fs;
use std::path::Path;

use spectralx_core::backbone::checkpoint;
use spectralx_core::dataio::spxr::{self, RasterFile};
use spectralx_core::image::{SegmentationMap, SpectralImage};
use spectralx_core::numerics::ParamStore;

use crate::error::CliError;

/// Fixed 24-entry label palette.
pub const PALETTE: [[u8; 3]; 24] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
    [255, 255, 255],
    [0, 0, 0],
    [100, 149, 237],
    [154, 205, 50],
];

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn at(path: &Path, e: spectralx_core::error::Error) -> CliError {
    match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn write_raster(path: &Path, image: &SpectralImage, labels: Option<&SegmentationMap>) -> Result<(), CliError> {
    write(path, &spxr::encode(image, labels)?)
}

pub fn read_raster(path: &Path) -> Result<RasterFile, CliError> {
    spxr::decode(&read(path)?).map_err(|e| at(path, e))
}

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<(), CliError> {
    write(path, &checkpoint::encode(store)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<checkpoint::Entry>, CliError> {
    checkpoint::decode(&read(path)?).map_err(|e| at(path, e))
}

/// Binary PPM (P6) of a label map through [`PALETTE`].
pub fn encode_ppm(map: &SegmentationMap) -> Result<Vec<u8>, CliError> {
    if map.classes() > PALETTE.len() {
        return Err(CliError::Data(format!("{} classes exceed the {}-color palette", map.classes(), PALETTE.len())));
    }
    let mut out = format!("P6\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    for &l in map.labels() {
        out.extend_from_slice(&PALETTE[l as usize]);
    }
    Ok(out)
}

/// Inverse of [`encode_ppm`]; colors outside the palette are an error.
pub fn decode_ppm(bytes: &[u8], classes: usize) -> Result<SegmentationMap, CliError> {
    let bad = |m: &str| CliError::Data(format!("PPM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected P6 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let body = bytes.get(pos..).ok_or_else(|| bad("missing pixels"))?;
    if body.len() != w * h * 3 {
        return Err(bad("pixel count does not match the header"));
    }
    let labels = body
        .chunks_exact(3)
        .map(|px| PALETTE.iter().position(|c| c == px).map(|i| i as u16).ok_or_else(|| bad("color outside the palette")))
        .collect::<Result<Vec<_>, _>>()?;
    SegmentationMap::new(h, w, classes, labels).map_err(CliError::from)
}

pub fn write_ppm(path: &Path, map: &SegmentationMap) -> Result<(), CliError> {
    write(path, &encode_ppm(map)?)
}

pub fn read_ppm(path: &Path, classes: usize) -> Result<SegmentationMap, CliError> {
    decode_ppm(&read(path)?, classes).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
