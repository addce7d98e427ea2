//! Binary container for trained surrogates.
//!
//! All integers and floats are little-endian; matrices are row-major.
//!
//! ```text
//! offset  size        field
//! 0       8           magic "EKOOPMDL"
//! 8       4           version (u32) = 1
//! 12      1           variant (u8): 0 = BE, 1 = BERG
//! 13      3           reserved, zero
//! 16      8           dt (f64, ps)
//! 24      4           z, lifted dimension (u32) = 5
//! 28      4           m, number of BERG training detunings (u32; 0 for BE)
//! 32      8·m         training detunings (f64, 1/ps), increasing
//! ...     8·z·z       K0
//! ...     8·z·z       B_Ω
//! ...     4           number of detuning operators d (u32; 1 for BE, m for BERG)
//! ...     8·z·z·d     B_δ matrices in training-detuning order
//! ...     8·4·z       C
//! ```
//!
//! Nothing may follow C.

use std::path::Path;

use crate::error::{Error, Result};
use crate::koopman::{BackProjection, KoopmanModel, Operator, Variant, LIFTED_DIM};

pub const MAGIC: [u8; 8] = *b"EKOOPMDL";
pub const VERSION: u32 = 1;

pub fn encode(model: &KoopmanModel) -> Vec<u8> {
    let z = LIFTED_DIM;
    let mut out = Vec::with_capacity(
        64 + 8 * (model.berg_detunings.len() + (2 + model.b_delta.len()) * z * z + 4 * z),
    );
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match model.variant {
        Variant::Be => 0,
        Variant::Berg => 1,
    });
    out.extend_from_slice(&[0; 3]);
    out.extend_from_slice(&model.dt.to_le_bytes());
    out.extend_from_slice(&(z as u32).to_le_bytes());
    out.extend_from_slice(&(model.berg_detunings.len() as u32).to_le_bytes());
    for d in &model.berg_detunings {
        out.extend_from_slice(&d.to_le_bytes());
    }
    put_operator(&mut out, &model.k0);
    put_operator(&mut out, &model.b_omega);
    out.extend_from_slice(&(model.b_delta.len() as u32).to_le_bytes());
    for b in &model.b_delta {
        put_operator(&mut out, b);
    }
    for i in 0..4 {
        for j in 0..z {
            out.extend_from_slice(&model.c[(i, j)].to_le_bytes());
        }
    }
    out
}

fn put_operator(out: &mut Vec<u8>, m: &Operator) {
    for i in 0..LIFTED_DIM {
        for j in 0..LIFTED_DIM {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::ModelFormat(format!("truncated at byte {} (need {n} more)", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn operator(&mut self) -> Result<Operator> {
        let mut m = Operator::zeros();
        for i in 0..LIFTED_DIM {
            for j in 0..LIFTED_DIM {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }
}

pub fn decode(buf: &[u8]) -> Result<KoopmanModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::ModelFormat("bad magic; not a model file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::ModelFormat(format!("unsupported version {version}")));
    }
    let variant = match r.take(1)?[0] {
        0 => Variant::Be,
        1 => Variant::Berg,
        v => return Err(Error::ModelFormat(format!("unknown variant tag {v}"))),
    };
    r.take(3)?;
    let dt = r.f64()?;
    let z = r.u32()? as usize;
    if z != LIFTED_DIM {
        return Err(Error::ModelFormat(format!(
            "lifted dimension {z}, expected {LIFTED_DIM}"
        )));
    }
    let m = r.u32()? as usize;
    // Bound counts by the remaining bytes before allocating.
    if m > buf.len() / 8 {
        return Err(Error::ModelFormat(
            "detuning count exceeds file size".into(),
        ));
    }
    let berg_detunings = (0..m).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let k0 = r.operator()?;
    let b_omega = r.operator()?;
    let d = r.u32()? as usize;
    if d > buf.len() / (8 * z * z) {
        return Err(Error::ModelFormat(
            "operator count exceeds file size".into(),
        ));
    }
    let b_delta = (0..d).map(|_| r.operator()).collect::<Result<Vec<_>>>()?;
    let mut c = BackProjection::zeros();
    for i in 0..4 {
        for j in 0..z {
            c[(i, j)] = r.f64()?;
        }
    }
    if r.pos != buf.len() {
        return Err(Error::ModelFormat(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }

    let consistent = match variant {
        Variant::Be => m == 0 && d == 1,
        Variant::Berg => m >= 2 && d == m && berg_detunings.windows(2).all(|w| w[0] < w[1]),
    };
    if !consistent {
        return Err(Error::ModelFormat(format!(
            "{} model with {m} detunings and {d} detuning operators",
            variant.name()
        )));
    }
    Ok(KoopmanModel {
        variant,
        dt,
        k0,
        b_omega,
        berg_detunings,
        b_delta,
        c,
    })
}

pub fn save(model: &KoopmanModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<KoopmanModel> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|e| Error::Parse {
        path: path.into(),
        message: e.to_string(),
    })
}
