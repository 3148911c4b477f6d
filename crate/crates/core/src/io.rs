//! Grid files, WAV files and little-endian decoding helpers.
//!
//! Grid file layout (little-endian):
//!
//! ```text
//! "SPG1"  u32 version (= 1)  u8 kind  u64 frames  u64 bins  f64 payload
//! ```
//! `kind` is 0 for log amplitude, 1 for phase, 2 for complex values stored as
//! interleaved (re, im) pairs.

use std::fs;
use std::path::Path;

use num_complex::Complex64;

use crate::dsp::Waveform;
use crate::error::{FormatError, Result};
use crate::grid::{ComplexGrid, Grid, RealGrid};

pub const GRID_MAGIC: [u8; 4] = *b"SPG1";
pub const GRID_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    LogAmplitude = 0,
    Phase = 1,
    Complex = 2,
}

impl TryFrom<u8> for GridKind {
    type Error = FormatError;

    fn try_from(v: u8) -> Result<Self, FormatError> {
        match v {
            0 => Ok(Self::LogAmplitude),
            1 => Ok(Self::Phase),
            2 => Ok(Self::Complex),
            other => Err(FormatError::UnknownKind(other)),
        }
    }
}

/// Contents of a grid file.
#[derive(Clone, Debug, PartialEq)]
pub enum GridFile {
    LogAmplitude(RealGrid),
    Phase(RealGrid),
    Complex(ComplexGrid),
}

impl GridFile {
    pub fn kind(&self) -> GridKind {
        match self {
            Self::LogAmplitude(_) => GridKind::LogAmplitude,
            Self::Phase(_) => GridKind::Phase,
            Self::Complex(_) => GridKind::Complex,
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            Self::LogAmplitude(g) | Self::Phase(g) => g.shape(),
            Self::Complex(g) => g.shape(),
        }
    }

    /// The real grid, if the file holds the requested real kind.
    pub fn into_real(self, kind: GridKind) -> Result<RealGrid> {
        match (self, kind) {
            (Self::LogAmplitude(g), GridKind::LogAmplitude) | (Self::Phase(g), GridKind::Phase) => {
                Ok(g)
            }
            (other, _) => Err(FormatError::Malformed(format!(
                "expected a {kind:?} grid, found {:?}",
                other.kind()
            ))
            .into()),
        }
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(FormatError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn f64_vec(&mut self, len: usize, what: &'static str) -> Result<Vec<f64>> {
        let bytes = self.take(
            len.checked_mul(8).ok_or(FormatError::Truncated(what))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

pub fn encode_grid(grid: &GridFile) -> Vec<u8> {
    let (frames, bins) = grid.shape();
    let mut out = Vec::with_capacity(25 + frames * bins * 16);
    out.extend_from_slice(&GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.push(grid.kind() as u8);
    out.extend_from_slice(&(frames as u64).to_le_bytes());
    out.extend_from_slice(&(bins as u64).to_le_bytes());
    match grid {
        GridFile::LogAmplitude(g) | GridFile::Phase(g) => {
            for v in g.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        GridFile::Complex(g) => {
            for z in g.data() {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<GridFile> {
    let mut r = ByteReader::new(bytes);
    let magic = r.array::<4>("magic")?;
    if magic != GRID_MAGIC {
        return Err(FormatError::BadMagic {
            expected: GRID_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = r.u32("version")?;
    if version != GRID_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: GRID_VERSION,
        }
        .into());
    }
    let kind = GridKind::try_from(r.u8("kind")?)?;
    let frames = usize::try_from(r.u64("frames")?)
        .map_err(|_| FormatError::Malformed("frame count overflows".into()))?;
    let bins = usize::try_from(r.u64("bins")?)
        .map_err(|_| FormatError::Malformed("bin count overflows".into()))?;
    let count = frames
        .checked_mul(bins)
        .ok_or_else(|| FormatError::Malformed("grid size overflows".into()))?;
    let values = match kind {
        GridKind::Complex => count
            .checked_mul(2)
            .ok_or_else(|| FormatError::Malformed("grid size overflows".into()))?,
        _ => count,
    };
    let payload = r.f64_vec(values, "payload")?;
    if !r.is_empty() {
        return Err(FormatError::Malformed("trailing bytes after payload".into()).into());
    }
    Ok(match kind {
        GridKind::LogAmplitude => GridFile::LogAmplitude(Grid::new(frames, bins, payload)?),
        GridKind::Phase => GridFile::Phase(Grid::new(frames, bins, payload)?),
        GridKind::Complex => GridFile::Complex(Grid::new(
            frames,
            bins,
            payload
                .chunks_exact(2)
                .map(|c| Complex64::new(c[0], c[1]))
                .collect(),
        )?),
    })
}

pub fn grid_write(path: impl AsRef<Path>, grid: &GridFile) -> Result<()> {
    fs::write(path, encode_grid(grid))?;
    Ok(())
}

pub fn grid_read(path: impl AsRef<Path>) -> Result<GridFile> {
    decode_grid(&fs::read(path)?)
}

/// Reads a mono 16-bit PCM file. When `expected_rate` is given, a different sample
/// rate is an error (no resampling is performed).
pub fn wav_read(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(FormatError::UnsupportedAudio(format!(
            "{} channels, only mono is supported",
            spec.channels
        ))
        .into());
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(FormatError::UnsupportedAudio(format!(
            "{:?} {}-bit samples, only 16-bit PCM is supported",
            spec.sample_format, spec.bits_per_sample
        ))
        .into());
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(FormatError::UnsupportedAudio(format!(
                "sample rate {} Hz, expected {rate} Hz",
                spec.sample_rate
            ))
            .into());
        }
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono 16-bit PCM, clamping to [−1, 1] first. Full scale is 32768, the same
/// divisor [`wav_read`] uses, with +1.0 saturating at 32767.
pub fn wav_write(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in wave.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().min(32767.0) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn format_err(bytes: &[u8]) -> FormatError {
        match decode_grid(bytes) {
            Err(Error::Format(e)) => e,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn grid_roundtrips() {
        let real = Grid::from_fn(3, 4, |f, n| (f as f64 - n as f64) * 0.37);
        let complex = Grid::from_fn(2, 3, |f, n| Complex64::new(f as f64, -(n as f64) / 3.0));
        for g in [
            GridFile::LogAmplitude(real.clone()),
            GridFile::Phase(real),
            GridFile::Complex(complex),
            GridFile::Phase(Grid::filled(0, 7, 0.0)),
        ] {
            assert_eq!(decode_grid(&encode_grid(&g)).unwrap(), g);
        }
        let empty = encode_grid(&GridFile::Phase(Grid::filled(0, 7, 0.0)));
        assert_eq!(empty.len(), 4 + 4 + 1 + 8 + 8);
    }

    #[test]
    fn grid_errors_are_distinct() {
        let good = encode_grid(&GridFile::LogAmplitude(Grid::filled(2, 2, 1.5)));
        let mut bad = good.clone();
        bad[1] = b'Q';
        assert!(matches!(format_err(&bad), FormatError::BadMagic { .. }));
        let mut bumped = good.clone();
        bumped[4] = 9;
        assert!(matches!(format_err(&bumped), FormatError::UnsupportedVersion { found: 9, .. }));
        assert!(matches!(format_err(&good[..good.len() - 1]), FormatError::Truncated(_)));
        assert!(matches!(format_err(&good[..6]), FormatError::Truncated(_)));
        let mut kind = good.clone();
        kind[8] = 7;
        assert_eq!(format_err(&kind), FormatError::UnknownKind(7));
    }

    #[test]
    fn wav_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..500).map(|i| ((i as f64) * 0.01).sin() * 0.95).collect();
        wav_write(&path, &Waveform::new(samples.clone(), 16000).unwrap()).unwrap();
        let back = wav_read(&path, Some(16000)).unwrap();
        let err = samples
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1.0 / 32768.0, "{err}");
        assert!(wav_read(&path, Some(8000)).is_err());

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..8 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(
            wav_read(&stereo, None),
            Err(Error::Format(FormatError::UnsupportedAudio(_)))
        ));

        let truncated = dir.path().join("t.wav");
        fs::write(&truncated, &fs::read(&path).unwrap()[..20]).unwrap();
        assert!(wav_read(&truncated, None).is_err());
    }
}
