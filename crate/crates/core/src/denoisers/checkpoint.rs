//! Binary model checkpoints.
//!
//! Layout: magic `DENW`, version (u32 LE), model kind (u32 LE), a
//! kind-specific architecture block, then every parameter grid's raw data as
//! little-endian 32-bit floats in declaration order. Shapes are derived from
//! the architecture block, so the payload carries no per-grid headers.
//!
//! Denoiser checkpoints also embed the linear-schedule description used in
//! training, so sampling can rebuild the exact schedule.

use std::io::{Read, Write};
use std::path::Path;

use super::condnet::{CondNetConfig, CondNetLite};
use crate::error::{Error, Result};
use crate::numerics::Grid;
use crate::schedule::ScheduleSpec;
use crate::selection::{ClassifierConfig, ConvClassifier};

pub const MAGIC: [u8; 4] = *b"DENW";
pub const VERSION: u32 = 1;

const KIND_CONDNET: u32 = 0;
const KIND_CLASSIFIER: u32 = 1;

/// A loaded model of either kind.
#[derive(Debug)]
pub enum ModelCheckpoint {
    CondNet {
        model: CondNetLite,
        schedule: ScheduleSpec,
    },
    Classifier(ConvClassifier),
}

impl ModelCheckpoint {
    pub fn into_condnet(self) -> Result<(CondNetLite, ScheduleSpec)> {
        match self {
            ModelCheckpoint::CondNet { model, schedule } => Ok((model, schedule)),
            ModelCheckpoint::Classifier(_) => Err(Error::Checkpoint(
                "expected a denoiser checkpoint, found a classifier".into(),
            )),
        }
    }

    pub fn into_classifier(self) -> Result<ConvClassifier> {
        match self {
            ModelCheckpoint::Classifier(c) => Ok(c),
            ModelCheckpoint::CondNet { .. } => Err(Error::Checkpoint(
                "expected a classifier checkpoint, found a denoiser".into(),
            )),
        }
    }
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn params(&mut self, params: &[Grid]) -> std::io::Result<()> {
        for p in params {
            for v in p.data() {
                self.0.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes::<8>()?))
    }
    fn params(&mut self, shapes: &[(String, Vec<usize>)]) -> Result<Vec<Grid>> {
        let mut out = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f32::from_le_bytes(self.bytes::<4>()?));
            }
            let grid = Grid::new(shape.clone(), data)
                .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
            out.push(grid);
        }
        let mut trailing = [0u8; 1];
        match self.inner.read(&mut trailing) {
            Ok(0) => Ok(out),
            Ok(_) => Err(Error::Checkpoint("trailing bytes after parameters".into())),
            Err(e) => Err(Error::Checkpoint(format!("read error: {e}"))),
        }
    }
}

pub fn write_condnet<W: Write>(
    mut w: W,
    model: &CondNetLite,
    schedule: &ScheduleSpec,
) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Checkpoint(format!("write failed: {e}"));
    w.write_all(&MAGIC).map_err(io_err)?;
    let mut w = Writer(w);
    let c = model.config();
    w.u32(VERSION).map_err(io_err)?;
    w.u32(KIND_CONDNET).map_err(io_err)?;
    w.u32(c.in_channels as u32).map_err(io_err)?;
    w.u32(c.base_width as u32).map_err(io_err)?;
    w.u32(c.channel_mults.len() as u32).map_err(io_err)?;
    for &m in &c.channel_mults {
        w.u32(m as u32).map_err(io_err)?;
    }
    w.u32(c.time_embed_dim as u32).map_err(io_err)?;
    w.u32(c.num_classes as u32).map_err(io_err)?;
    w.u32(c.height as u32).map_err(io_err)?;
    w.u32(c.width as u32).map_err(io_err)?;
    w.f64(c.time_scale).map_err(io_err)?;
    w.u32(schedule.t_count as u32).map_err(io_err)?;
    w.f64(schedule.beta_start).map_err(io_err)?;
    w.f64(schedule.beta_end).map_err(io_err)?;
    w.params(model.params()).map_err(io_err)
}

pub fn write_classifier<W: Write>(mut w: W, model: &ConvClassifier) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Checkpoint(format!("write failed: {e}"));
    w.write_all(&MAGIC).map_err(io_err)?;
    let mut w = Writer(w);
    let c = model.config();
    w.u32(VERSION).map_err(io_err)?;
    w.u32(KIND_CLASSIFIER).map_err(io_err)?;
    w.u32(c.in_channels as u32).map_err(io_err)?;
    w.u32(c.widths.len() as u32).map_err(io_err)?;
    for &width in &c.widths {
        w.u32(width as u32).map_err(io_err)?;
    }
    w.u32(c.num_classes as u32).map_err(io_err)?;
    w.u32(c.height as u32).map_err(io_err)?;
    w.u32(c.width as u32).map_err(io_err)?;
    w.params(model.params()).map_err(io_err)
}

pub fn read<R: Read>(mut r: R) -> Result<ModelCheckpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut r = Reader { inner: r };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    match r.u32()? {
        KIND_CONDNET => {
            let in_channels = r.usize()?;
            let base_width = r.usize()?;
            let n_mults = r.usize()?;
            let mut channel_mults = Vec::with_capacity(n_mults);
            for _ in 0..n_mults {
                channel_mults.push(r.usize()?);
            }
            let time_embed_dim = r.usize()?;
            let num_classes = r.usize()?;
            let height = r.usize()?;
            let width = r.usize()?;
            let time_scale = r.f64()?;
            let schedule = ScheduleSpec {
                t_count: r.usize()?,
                beta_start: r.f64()?,
                beta_end: r.f64()?,
            };
            let config = CondNetConfig {
                in_channels,
                base_width,
                channel_mults,
                time_embed_dim,
                num_classes,
                height,
                width,
                time_scale,
            };
            let params = r.params(&config.param_shapes())?;
            Ok(ModelCheckpoint::CondNet {
                model: CondNetLite::from_params(config, params)?,
                schedule,
            })
        }
        KIND_CLASSIFIER => {
            let in_channels = r.usize()?;
            let n_widths = r.usize()?;
            let mut widths = Vec::with_capacity(n_widths);
            for _ in 0..n_widths {
                widths.push(r.usize()?);
            }
            let config = ClassifierConfig {
                in_channels,
                widths,
                num_classes: r.usize()?,
                height: r.usize()?,
                width: r.usize()?,
            };
            let params = r.params(&config.param_shapes())?;
            Ok(ModelCheckpoint::Classifier(ConvClassifier::from_params(
                config, params,
            )?))
        }
        kind => Err(Error::Checkpoint(format!("unknown model kind {kind}"))),
    }
}

pub fn save_condnet(
    path: impl AsRef<Path>,
    model: &CondNetLite,
    schedule: &ScheduleSpec,
) -> Result<()> {
    let file = std::fs::File::create(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    write_condnet(std::io::BufWriter::new(file), model, schedule)
}

pub fn save_classifier(path: impl AsRef<Path>, model: &ConvClassifier) -> Result<()> {
    let file = std::fs::File::create(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    write_classifier(std::io::BufWriter::new(file), model)
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    read(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_condnet() -> CondNetLite {
        CondNetLite::new(
            CondNetConfig {
                in_channels: 1,
                base_width: 4,
                channel_mults: vec![1, 2],
                time_embed_dim: 8,
                num_classes: 3,
                height: 8,
                width: 8,
                time_scale: 100.0,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn condnet_roundtrip_is_exact() {
        let model = tiny_condnet();
        let spec = ScheduleSpec {
            t_count: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        };
        let mut buf = Vec::new();
        write_condnet(&mut buf, &model, &spec).unwrap();
        let (loaded, spec2) = read(buf.as_slice()).unwrap().into_condnet().unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded.params(), model.params());
    }

    #[test]
    fn classifier_roundtrip_is_exact() {
        let clf = ConvClassifier::new(
            ClassifierConfig {
                in_channels: 1,
                widths: vec![4, 8],
                num_classes: 3,
                height: 8,
                width: 8,
            },
            3,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_classifier(&mut buf, &clf).unwrap();
        let loaded = read(buf.as_slice()).unwrap().into_classifier().unwrap();
        assert_eq!(loaded.config(), clf.config());
        assert_eq!(loaded.params(), clf.params());
    }

    #[test]
    fn bad_magic_is_reported() {
        let err = read(&b"NOPE0000"[..]).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncation_is_reported_not_panicked() {
        let model = tiny_condnet();
        let spec = ScheduleSpec::default();
        let mut buf = Vec::new();
        write_condnet(&mut buf, &model, &spec).unwrap();
        for cut in [3usize, 11, 40, buf.len() - 5, buf.len() - 1] {
            let err = read(&buf[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "cut={cut}: {err}");
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let model = tiny_condnet();
        let mut buf = Vec::new();
        write_condnet(&mut buf, &model, &ScheduleSpec::default()).unwrap();
        buf.push(0);
        assert!(read(buf.as_slice()).is_err());
    }
}
