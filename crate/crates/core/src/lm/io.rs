//! Binary artifact formats. All integers are little-endian u32/u64, all
//! weight blobs little-endian f32, matrices row-major.
//!
//! Soft-prompt bank: magic `DELSPB1`, k, d (u32), length-prefixed UTF-8
//! provenance, then k×d f32.
//!
//! LM checkpoint: magic `SRLMCK1`, version, length-prefixed config JSON,
//! then per-partition sections (`base`, `soft`, `adapters`) of named,
//! shape-prefixed f32 fields.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::num::Mat;

use super::{
    AdaptedProj, AdapterSet, AdapterTriplet, BankProvenance, LmBase, LmConfig, LmParams,
    SoftPromptBank,
};

pub const BANK_MAGIC: &[u8; 7] = b"DELSPB1";
pub const LM_MAGIC: &[u8; 7] = b"SRLMCK1";
pub const ADAPTER_MAGIC: &[u8; 7] = b"SRADPT1";

pub(crate) fn w_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

pub(crate) fn w_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

pub(crate) fn w_block(out: &mut Vec<u8>, bytes: &[u8]) {
    w_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

pub(crate) fn w_str(out: &mut Vec<u8>, s: &str) {
    w_block(out, s.as_bytes());
}

pub(crate) fn w_mat(out: &mut Vec<u8>, m: &Mat) {
    w_u32(out, m.rows as u32);
    w_u32(out, m.cols as u32);
    out.extend_from_slice(&m.to_f32_bytes());
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &Path) -> Self {
        Reader {
            buf,
            pos: 0,
            path: path.display().to_string(),
        }
    }

    fn fail(&self, msg: &str) -> Error {
        Error::Format(format!("{}: {msg}", self.path))
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn r_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn r_u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn r_block(&mut self) -> Result<&'a [u8]> {
        let n = self.r_u32()? as usize;
        self.take(n)
    }

    pub(crate) fn r_str(&mut self) -> Result<String> {
        let b = self.r_block()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail("invalid UTF-8 block"))
    }

    pub(crate) fn r_mat(&mut self) -> Result<Mat> {
        let rows = self.r_u32()? as usize;
        let cols = self.r_u32()? as usize;
        let bytes = self.take(rows * cols * 4)?;
        Mat::from_f32_bytes(rows, cols, bytes).ok_or_else(|| self.fail("bad matrix block"))
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(self.fail("bad magic"));
        }
        Ok(())
    }

    pub(crate) fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail("trailing bytes"));
        }
        Ok(())
    }
}

pub fn write_bank(bank: &SoftPromptBank, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(BANK_MAGIC);
    w_u32(&mut out, bank.k() as u32);
    w_u32(&mut out, bank.d() as u32);
    w_str(&mut out, &bank.provenance.encode(bank.trained));
    out.extend_from_slice(&bank.rows.to_f32_bytes());
    atomic_write(path, &out)
}

pub fn read_bank(path: &Path) -> Result<SoftPromptBank> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf, path);
    r.expect_magic(BANK_MAGIC)?;
    let k = r.r_u32()? as usize;
    let d = r.r_u32()? as usize;
    let (provenance, trained) = BankProvenance::decode(&r.r_str()?)?;
    let bytes = r.take(k * d * 4)?;
    let rows = Mat::from_f32_bytes(k, d, bytes)
        .ok_or_else(|| Error::Format(format!("{}: bad bank block", path.display())))?;
    r.done()?;
    Ok(SoftPromptBank {
        rows,
        trained,
        provenance,
    })
}

fn write_named_fields(out: &mut Vec<u8>, fields: &[(String, &Mat)]) {
    w_u32(out, fields.len() as u32);
    for (name, mat) in fields {
        w_str(out, name);
        w_mat(out, mat);
    }
}

fn read_named_fields(r: &mut Reader<'_>) -> Result<Vec<(String, Mat)>> {
    let count = r.r_u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.r_str()?;
        let mat = r.r_mat()?;
        out.push((name, mat));
    }
    Ok(out)
}

fn proj_tag(p: AdaptedProj) -> u32 {
    match p {
        AdaptedProj::Query => 0,
        AdaptedProj::Value => 1,
    }
}

fn proj_from_tag(t: u32) -> Result<AdaptedProj> {
    match t {
        0 => Ok(AdaptedProj::Query),
        1 => Ok(AdaptedProj::Value),
        other => Err(Error::Format(format!("unknown projection tag {other}"))),
    }
}

fn write_adapter_section(out: &mut Vec<u8>, ad: &AdapterSet) {
    w_u32(out, ad.rank as u32);
    w_u32(out, ad.budget as u32);
    w_u32(out, ad.triplets.len() as u32);
    for t in &ad.triplets {
        w_u32(out, t.layer as u32);
        w_u32(out, proj_tag(t.proj));
        w_mat(out, &t.p);
        w_mat(out, &t.q);
        w_mat(out, &t.lam);
        w_mat(out, &t.importance);
    }
}

fn read_adapter_section(r: &mut Reader<'_>) -> Result<AdapterSet> {
    let rank = r.r_u32()? as usize;
    let budget = r.r_u32()? as usize;
    let count = r.r_u32()? as usize;
    let mut triplets = Vec::with_capacity(count);
    for _ in 0..count {
        let layer = r.r_u32()? as usize;
        let proj = proj_from_tag(r.r_u32()?)?;
        let p = r.r_mat()?;
        let q = r.r_mat()?;
        let lam = r.r_mat()?;
        let importance = r.r_mat()?;
        triplets.push(AdapterTriplet {
            layer,
            proj,
            p,
            q,
            lam,
            importance,
        });
    }
    Ok(AdapterSet {
        rank,
        budget,
        triplets,
    })
}

/// Full checkpoint: config plus base/soft/adapters sections.
pub fn write_lm_checkpoint(params: &LmParams, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(LM_MAGIC);
    w_u32(&mut out, 1); // format version
    let config_json = serde_json::to_string(&params.base.config)
        .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    w_str(&mut out, &config_json);

    w_str(&mut out, "base");
    write_named_fields(&mut out, &params.base.named_tensors());

    w_str(&mut out, "soft");
    w_str(&mut out, &params.soft.provenance.encode(params.soft.trained));
    w_mat(&mut out, &params.soft.rows);

    match &params.adapters {
        Some(ad) => {
            w_str(&mut out, "adapters");
            write_adapter_section(&mut out, ad);
        }
        None => w_str(&mut out, "end"),
    }
    atomic_write(path, &out)
}

pub fn read_lm_checkpoint(path: &Path) -> Result<LmParams> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf, path);
    r.expect_magic(LM_MAGIC)?;
    let version = r.r_u32()?;
    if version != 1 {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config: LmConfig = serde_json::from_str(&r.r_str()?)
        .map_err(|e| Error::Format(format!("config block: {e}")))?;

    let tag = r.r_str()?;
    if tag != "base" {
        return Err(Error::Format(format!("expected base section, got `{tag}`")));
    }
    let fields = read_named_fields(&mut r)?;
    let mut base = LmBase::init(&config)?;
    {
        let expected: Vec<String> = base.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        let got: Vec<String> = fields.iter().map(|(n, _)| n.clone()).collect();
        if expected != got {
            return Err(Error::Format(format!(
                "{}: base field order mismatch",
                path.display()
            )));
        }
        for (tensor, (_, mat)) in base.tensors_mut().into_iter().zip(fields.into_iter()) {
            if tensor.rows != mat.rows || tensor.cols != mat.cols {
                return Err(Error::Format(format!("{}: field shape mismatch", path.display())));
            }
            *tensor = mat;
        }
    }

    let tag = r.r_str()?;
    if tag != "soft" {
        return Err(Error::Format(format!("expected soft section, got `{tag}`")));
    }
    let (provenance, trained) = BankProvenance::decode(&r.r_str()?)?;
    let rows = r.r_mat()?;
    let soft = SoftPromptBank {
        rows,
        trained,
        provenance,
    };

    let tag = r.r_str()?;
    let adapters = match tag.as_str() {
        "adapters" => Some(read_adapter_section(&mut r)?),
        "end" => None,
        other => return Err(Error::Format(format!("unexpected section `{other}`"))),
    };
    r.done()?;
    Ok(LmParams {
        base,
        soft,
        adapters,
    })
}

/// Standalone adapter checkpoint with a free-form provenance string (the
/// ablation name is embedded there).
pub fn write_adapters(ad: &AdapterSet, provenance: &str, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(ADAPTER_MAGIC);
    w_str(&mut out, provenance);
    write_adapter_section(&mut out, ad);
    atomic_write(path, &out)
}

pub fn read_adapters(path: &Path) -> Result<(AdapterSet, String)> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf, path);
    r.expect_magic(ADAPTER_MAGIC)?;
    let provenance = r.r_str()?;
    let ad = read_adapter_section(&mut r)?;
    r.done()?;
    Ok((ad, provenance))
}

/// Write via a temp file + rename so interrupted runs never leave a
/// half-written artifact behind.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read an entire file (helper mirroring `atomic_write`).
#[allow(dead_code)]
pub(crate) fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}
