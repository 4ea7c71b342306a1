//! Image types and the raw float32 raster format.
//!
//! On disk an image is `<name>.bin` (little-endian float32, band-planar) plus
//! a `<name>.json` header. Pixel values are always normalized to `[0, 1]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::argument;
use crate::{Error, Result, Scalar, Tensor};

fn validate_values<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    for (i, &v) in t.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Validation(format!("non-finite value at element {i}")));
        }
        if v < T::zero() || v > T::one() {
            return Err(Error::Validation(format!("value {v} at element {i} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Clamps into `[0, 1]`; NaN is left in place for validation to reject.
pub fn clip_unit<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v.is_nan() { v } else { v.max(T::zero()).min(T::one()) })
}

/// Multi-spectral image, `bands >= 2`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MsImage<T> {
    data: Tensor<T>,
    band_names: Option<Vec<String>>,
}

impl<T: Scalar> MsImage<T> {
    /// Wraps a `[bands, height, width]` tensor after checking invariants.
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::Validation(format!("expected [bands, h, w], got {:?}", data.shape())));
        }
        if data.shape()[0] < 2 {
            return Err(Error::Validation(format!(
                "multi-spectral image needs at least 2 bands, got {}",
                data.shape()[0]
            )));
        }
        validate_values(&data)?;
        Ok(Self {
            data,
            band_names: None,
        })
    }

    /// Clamps to `[0, 1]` first. Non-finite values are still rejected.
    pub fn from_clipped(data: Tensor<T>) -> Result<Self> {
        Self::new(clip_unit(&data))
    }

    pub fn constant(height: usize, width: usize, bands: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full(&[bands, height, width], T::lit(value)))
    }

    pub fn with_band_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.bands() {
            return Err(Error::Validation(format!(
                "{} band names for {} bands",
                names.len(),
                self.bands()
            )));
        }
        self.band_names = Some(names);
        Ok(self)
    }

    pub fn band_names(&self) -> Option<&[String]> {
        self.band_names.as_deref()
    }

    pub fn bands(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn band(&self, b: usize) -> &[T] {
        self.data.channel(b)
    }

    pub fn get(&self, band: usize, y: usize, x: usize) -> T {
        self.data.data()[(band * self.height() + y) * self.width() + x]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn cast<U: Scalar>(&self) -> MsImage<U> {
        MsImage {
            data: clip_unit(&self.data.cast()),
            band_names: self.band_names.clone(),
        }
    }
}

/// Single-band panchromatic image, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PanImage<T> {
    data: Tensor<T>,
}

impl<T: Scalar> PanImage<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.shape().len() != 3 || data.shape()[0] != 1 {
            return Err(Error::Validation(format!(
                "panchromatic image must be [1, h, w], got {:?}",
                data.shape()
            )));
        }
        validate_values(&data)?;
        Ok(Self { data })
    }

    pub fn from_clipped(data: Tensor<T>) -> Result<Self> {
        Self::new(clip_unit(&data))
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full(&[1, height, width], T::lit(value)))
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn pixels(&self) -> &[T] {
        self.data.data()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn cast<U: Scalar>(&self) -> PanImage<U> {
        PanImage {
            data: clip_unit(&self.data.cast()),
        }
    }
}

/// Either kind of image, as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Image<T> {
    Ms(MsImage<T>),
    Pan(PanImage<T>),
}

impl<T: Scalar> Image<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        match self {
            Image::Ms(m) => m.tensor(),
            Image::Pan(p) => p.tensor(),
        }
    }

    pub fn into_ms(self) -> Result<MsImage<T>> {
        match self {
            Image::Ms(m) => Ok(m),
            Image::Pan(_) => Err(Error::Validation("expected a multi-spectral raster, found a single band".into())),
        }
    }

    pub fn into_pan(self) -> Result<PanImage<T>> {
        match self {
            Image::Pan(p) => Ok(p),
            Image::Ms(m) => Err(Error::Validation(format!(
                "expected a panchromatic raster, found {} bands",
                m.bands()
            ))),
        }
    }
}

impl<T: Scalar> From<MsImage<T>> for Image<T> {
    fn from(m: MsImage<T>) -> Self {
        Image::Ms(m)
    }
}

impl<T: Scalar> From<PanImage<T>> for Image<T> {
    fn from(p: PanImage<T>) -> Self {
        Image::Pan(p)
    }
}

/// JSON sidecar of a raster payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub dtype: String,
    pub range: [f64; 2],
    pub byte_order: String,
    pub layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<BTreeMap<String, String>>,
}

impl RasterHeader {
    fn for_shape(bands: usize, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bands,
            dtype: "float32".into(),
            range: [0.0, 1.0],
            byte_order: "little".into(),
            layout: "band-planar".into(),
            band_names: None,
            provenance: None,
        }
    }

    pub fn element_count(&self) -> usize {
        self.height * self.width * self.bands
    }

    fn check(&self) -> Result<()> {
        if self.dtype != "float32" {
            return Err(Error::Format(format!("unsupported dtype {:?}", self.dtype)));
        }
        if self.byte_order != "little" {
            return Err(Error::Format(format!("unsupported byte order {:?}", self.byte_order)));
        }
        if self.layout != "band-planar" {
            return Err(Error::Format(format!("unsupported layout {:?}", self.layout)));
        }
        if self.range != [0.0, 1.0] {
            return Err(Error::Format(format!("unsupported value range {:?}", self.range)));
        }
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::Format("zero-sized raster".into()));
        }
        if let Some(names) = &self.band_names {
            if names.len() != self.bands {
                return Err(Error::Format(format!("{} band names for {} bands", names.len(), self.bands)));
            }
        }
        Ok(())
    }
}

/// `(payload, header)` paths for a raster name; any extension is replaced.
pub fn raster_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("bin"), path.with_extension("json"))
}

fn write_raster<T: Scalar>(
    data: &Tensor<T>,
    band_names: Option<&[String]>,
    provenance: Option<&BTreeMap<String, String>>,
    path: &Path,
) -> Result<()> {
    validate_values(data)?;
    let (bands, height, width) = data.dims3();
    let mut header = RasterHeader::for_shape(bands, height, width);
    header.band_names = band_names.map(<[String]>::to_vec);
    header.provenance = provenance.cloned();
    let mut payload = Vec::with_capacity(data.len() * 4);
    for &v in data.data() {
        payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let (bin, json) = raster_paths(path);
    if let Some(dir) = bin.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&bin, payload)?;
    let mut text = serde_json::to_string_pretty(&header).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(&json, text)?;
    Ok(())
}

/// Writes `img` as `<path>.bin` + `<path>.json`. Values are validated first.
pub fn save_raster<T: Scalar>(img: &Image<T>, path: &Path) -> Result<()> {
    save_raster_with_provenance(img, path, None)
}

pub fn save_raster_with_provenance<T: Scalar>(
    img: &Image<T>,
    path: &Path,
    provenance: Option<&BTreeMap<String, String>>,
) -> Result<()> {
    match img {
        Image::Ms(m) => write_raster(m.tensor(), m.band_names(), provenance, path),
        Image::Pan(p) => write_raster(p.tensor(), None, provenance, path),
    }
}

pub fn save_ms<T: Scalar>(img: &MsImage<T>, path: &Path) -> Result<()> {
    write_raster(img.tensor(), img.band_names(), None, path)
}

pub fn save_pan<T: Scalar>(img: &PanImage<T>, path: &Path) -> Result<()> {
    write_raster(img.tensor(), None, None, path)
}

pub fn read_header(path: &Path) -> Result<RasterHeader> {
    let (_, json) = raster_paths(path);
    let text = fs::read_to_string(&json)?;
    let header: RasterHeader =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    header.check()?;
    Ok(header)
}

/// Reads a raster and its header.
pub fn load_raster_with_header<T: Scalar>(path: &Path) -> Result<(Image<T>, RasterHeader)> {
    let header = read_header(path)?;
    let (bin, _) = raster_paths(path);
    let payload = fs::read(&bin)?;
    if payload.len() != header.element_count() * 4 {
        return Err(Error::Integrity(format!(
            "{}: header declares {}x{}x{} = {} float32 values, payload holds {} bytes",
            bin.display(),
            header.height,
            header.width,
            header.bands,
            header.element_count(),
            payload.len()
        )));
    }
    let data: Vec<T> = payload
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let tensor = Tensor::new(&[header.bands, header.height, header.width], data);
    let image = if header.bands == 1 {
        Image::Pan(PanImage::new(tensor)?)
    } else {
        let mut ms = MsImage::new(tensor)?;
        if let Some(names) = &header.band_names {
            ms = ms.with_band_names(names.clone())?;
        }
        Image::Ms(ms)
    };
    Ok((image, header))
}

pub fn load_raster<T: Scalar>(path: &Path) -> Result<Image<T>> {
    load_raster_with_header(path).map(|(img, _)| img)
}

/// Integer-valued raster as delivered by a sensor, band-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRaster {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub data: Vec<u16>,
}

fn normalize_tensor<T: Scalar>(raw: &RawRaster, bit_depth: u32) -> Result<Tensor<T>> {
    if !(1..=16).contains(&bit_depth) {
        return Err(argument!("bit depth {bit_depth} outside 1..=16"));
    }
    if raw.data.len() != raw.height * raw.width * raw.bands {
        return Err(Error::Integrity(format!(
            "raw raster declares {}x{}x{} but holds {} values",
            raw.height,
            raw.width,
            raw.bands,
            raw.data.len()
        )));
    }
    let full_scale = (1u32 << bit_depth) - 1;
    if let Some((i, &v)) = raw.data.iter().enumerate().find(|(_, &v)| v as u32 > full_scale) {
        return Err(Error::Validation(format!(
            "raw value {v} at element {i} exceeds {bit_depth}-bit full scale {full_scale}"
        )));
    }
    let scale = full_scale as f64;
    Ok(Tensor::new(
        &[raw.bands, raw.height, raw.width],
        raw.data.iter().map(|&v| T::lit(v as f64 / scale)).collect(),
    ))
}

/// Divides raw counts by `2^bit_depth - 1`.
pub fn normalize<T: Scalar>(raw: &RawRaster, bit_depth: u32) -> Result<MsImage<T>> {
    MsImage::new(normalize_tensor(raw, bit_depth)?)
}

pub fn normalize_pan<T: Scalar>(raw: &RawRaster, bit_depth: u32) -> Result<PanImage<T>> {
    PanImage::new(normalize_tensor(raw, bit_depth)?)
}

/// Catmull-Rom (`a = -0.5`) weights for taps at offsets -1, 0, 1, 2 from the
/// sample left of a fractional position `t` in `[0, 1)`.
pub fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Half-sample symmetric reflection of an index into `0..n`.
pub fn reflect_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Output pixel `o` sits at input coordinate `(o + 0.5) / r - 0.5`. Returns
/// the sample left of it and the Catmull-Rom taps for that phase.
fn taps_for(o: usize, r: usize, taps: &[[f64; 4]]) -> (isize, &[f64; 4]) {
    let twice = 2 * o as isize + 1 - r as isize;
    let base = twice.div_euclid(2 * r as isize);
    let phase = twice.rem_euclid(2 * r as isize) as usize;
    (base, &taps[phase / 2 + (phase % 2) * r])
}

fn upsample_line<T: Scalar>(src: &[T], r: usize, taps: &[[f64; 4]], dst: &mut [T]) {
    let n = src.len();
    for (o, out) in dst.iter_mut().enumerate() {
        let (base, w) = taps_for(o, r, taps);
        let mut acc = 0.0;
        for (k, &wk) in w.iter().enumerate() {
            acc += wk * src[reflect_index(base - 1 + k as isize, n)].as_f64();
        }
        *out = T::lit(acc);
    }
}

/// Separable Catmull-Rom upsampling of every channel by an integer factor,
/// without clipping. Pixel centers are aligned (half-pixel convention), so
/// every input sample contributes total weight `r` per axis and the mean is
/// preserved exactly.
pub fn upsample_tensor<T: Scalar>(t: &Tensor<T>, r: usize) -> Tensor<T> {
    let (c, h, w) = t.dims3();
    let (oh, ow) = (h * r, w * r);
    // index p covers even offsets p / r, index r + p the odd ones (p + 0.5) / r
    let taps: Vec<[f64; 4]> = (0..2 * r)
        .map(|i| catmull_rom_weights((i % r) as f64 / r as f64 + if i >= r { 0.5 / r as f64 } else { 0.0 }))
        .collect();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut rows = vec![T::zero(); h * ow];
    let mut column = vec![T::zero(); h];
    let mut column_out = vec![T::zero(); oh];
    for ci in 0..c {
        let plane = t.channel(ci);
        for y in 0..h {
            upsample_line(&plane[y * w..(y + 1) * w], r, &taps, &mut rows[y * ow..(y + 1) * ow]);
        }
        let dst = &mut out.data_mut()[ci * oh * ow..(ci + 1) * oh * ow];
        for x in 0..ow {
            for y in 0..h {
                column[y] = rows[y * ow + x];
            }
            upsample_line(&column, r, &taps, &mut column_out);
            for y in 0..oh {
                dst[y * ow + x] = column_out[y];
            }
        }
    }
    out
}

/// Bicubic (Catmull-Rom) upsampling by `r >= 2`, clipped to `[0, 1]`.
pub fn bicubic_upsample<T: Scalar>(img: &MsImage<T>, r: usize) -> Result<MsImage<T>> {
    if r < 2 {
        return Err(argument!("upsampling ratio must be at least 2, got {r}"));
    }
    MsImage::from_clipped(upsample_tensor(img.tensor(), r))
}
