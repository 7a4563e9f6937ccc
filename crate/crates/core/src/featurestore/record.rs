//! The `.slf` record container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "SLF1" | version u16 | flags u16 | frames u32 | label u32 | signer u32
//! per frame: 126 f32 hand | 12 f32 arm | 120 f32 lip | 2 x (present u8, cx f32, cy f32)
//! ```
//!
//! Flag bit 0 marks a present label; an absent label is stored as `u32::MAX`.
//! The gloss text is not part of the record; it lives in the manifest's class table.

use std::fs;
use std::path::Path;

use super::{
    FeatureSequence, FrameFeatures, HandCenter, ARM_POINTS_DIM, HAND_SHAPE_DIM, LIP_SHAPE_DIM,
};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SLF1";
pub const FORMAT_VERSION: u16 = 1;

const FLAG_LABEL: u16 = 1;
const NO_LABEL: u32 = u32::MAX;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 4 + 4;
const CENTER_LEN: usize = 1 + 4 + 4;
const FRAME_LEN: usize = (HAND_SHAPE_DIM + ARM_POINTS_DIM + LIP_SHAPE_DIM) * 4 + 2 * CENTER_LEN;

pub fn encode_record(seq: &FeatureSequence) -> Result<Vec<u8>> {
    seq.validate()?;
    if seq.label_id == Some(NO_LABEL) {
        return Err(Error::Argument("label id u32::MAX is reserved".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + seq.len() * FRAME_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let flags = if seq.label_id.is_some() {
        FLAG_LABEL
    } else {
        0
    };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    out.extend_from_slice(&seq.label_id.unwrap_or(NO_LABEL).to_le_bytes());
    out.extend_from_slice(&seq.signer_id.to_le_bytes());
    for f in &seq.frames {
        for v in f.hand_shape.iter().chain(&f.arm_points).chain(&f.lip_shape) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &f.hand_centers {
            let (present, c) = match c {
                Some(c) => (1u8, *c),
                None => (0u8, HandCenter::new(0.0, 0.0)),
            };
            out.push(present);
            out.extend_from_slice(&c.x.to_le_bytes());
            out.extend_from_slice(&c.y.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let bytes = self.buf.get(self.pos..self.pos + N)?;
        self.pos += N;
        bytes.try_into().ok()
    }
    fn u16(&mut self) -> Option<u16> {
        self.take().map(u16::from_le_bytes)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take().map(u32::from_le_bytes)
    }
    fn f32(&mut self) -> Option<f32> {
        self.take().map(f32::from_le_bytes)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take::<1>().map(|b| b[0])
    }
    fn floats(&mut self, n: usize) -> Option<Vec<f32>> {
        (0..n).map(|_| self.f32()).collect()
    }
}

pub fn decode_record(bytes: &[u8], path: &Path) -> Result<FeatureSequence> {
    let format = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let corrupt = |msg: &str| Error::CorruptRecord {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = cur
        .take()
        .ok_or_else(|| format("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(format(format!("bad magic {magic:?}")));
    }
    let version = cur.u16().ok_or_else(|| corrupt("truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(format(format!("unsupported version {version}")));
    }
    let flags = cur.u16().ok_or_else(|| corrupt("truncated header"))?;
    if flags & !FLAG_LABEL != 0 {
        return Err(format(format!("unknown flag bits {flags:#06x}")));
    }
    let count = cur.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
    let label = cur.u32().ok_or_else(|| corrupt("truncated header"))?;
    let signer_id = cur.u32().ok_or_else(|| corrupt("truncated header"))?;
    let label_id = match (flags & FLAG_LABEL != 0, label) {
        (true, NO_LABEL) => return Err(format("label flag set but label is absent".into())),
        (true, l) => Some(l),
        (false, NO_LABEL) => None,
        (false, l) => return Err(format(format!("label {l} stored without label flag"))),
    };
    if count == 0 {
        return Err(corrupt("record has zero frames"));
    }
    let expected = HEADER_LEN + count * FRAME_LEN;
    if bytes.len() < expected {
        return Err(corrupt(&format!(
            "truncated payload: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(corrupt("trailing bytes after last frame"));
    }
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let mut frame = FrameFeatures {
            hand_shape: cur
                .floats(HAND_SHAPE_DIM)
                .ok_or_else(|| corrupt("short frame"))?,
            arm_points: cur
                .floats(ARM_POINTS_DIM)
                .ok_or_else(|| corrupt("short frame"))?,
            lip_shape: cur
                .floats(LIP_SHAPE_DIM)
                .ok_or_else(|| corrupt("short frame"))?,
            hand_centers: [None, None],
        };
        for slot in frame.hand_centers.iter_mut() {
            let present = cur.u8().ok_or_else(|| corrupt("short frame"))?;
            let x = cur.f32().ok_or_else(|| corrupt("short frame"))?;
            let y = cur.f32().ok_or_else(|| corrupt("short frame"))?;
            *slot = match present {
                0 => None,
                1 => Some(HandCenter::new(x, y)),
                p => return Err(corrupt(&format!("hand presence byte {p}"))),
            };
        }
        frames.push(frame);
    }
    Ok(FeatureSequence {
        frames,
        label_id,
        signer_id,
        gloss: None,
    })
}

pub fn save_record(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_record(seq)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_record(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_record(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_center() -> impl Strategy<Value = Option<HandCenter>> {
        proptest::option::of((0.0f32..=1.0, 0.0f32..=1.0).prop_map(|(x, y)| HandCenter::new(x, y)))
    }

    fn arb_frame() -> impl Strategy<Value = FrameFeatures> {
        (
            proptest::collection::vec(-10.0f32..10.0, HAND_SHAPE_DIM),
            proptest::collection::vec(-10.0f32..10.0, ARM_POINTS_DIM),
            proptest::collection::vec(-10.0f32..10.0, LIP_SHAPE_DIM),
            arb_center(),
            arb_center(),
        )
            .prop_map(|(h, a, l, c0, c1)| FrameFeatures {
                hand_shape: h,
                arm_points: a,
                lip_shape: l,
                hand_centers: [c0, c1],
            })
    }

    fn arb_seq() -> impl Strategy<Value = FeatureSequence> {
        (
            proptest::collection::vec(arb_frame(), 1..6),
            proptest::option::of(0u32..1000),
            any::<u32>(),
        )
            .prop_map(|(frames, label_id, signer_id)| FeatureSequence {
                frames,
                label_id,
                signer_id,
                gloss: None,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_is_identity(seq in arb_seq()) {
            let bytes = encode_record(&seq).unwrap();
            let back = decode_record(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back, seq);
        }
    }

    #[test]
    fn single_zero_frame_round_trips() {
        let seq = FeatureSequence {
            frames: vec![FrameFeatures::zeros()],
            label_id: None,
            signer_id: 0,
            gloss: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.slf");
        save_record(&seq, &p).unwrap();
        let back = load_record(&p).unwrap();
        assert_eq!(back, seq);
        assert_eq!(back.frames[0].hand_centers, [None, None]);
        assert_eq!(
            fs::metadata(&p).unwrap().len() as usize,
            HEADER_LEN + FRAME_LEN
        );
    }

    #[test]
    fn header_layout_is_fixed() {
        let seq = FeatureSequence {
            frames: vec![FrameFeatures::zeros()],
            label_id: Some(7),
            signer_id: 3,
            gloss: None,
        };
        let b = encode_record(&seq).unwrap();
        assert_eq!(&b[..4], b"SLF1");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..8], &[1, 0]);
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(&b[12..16], &[7, 0, 0, 0]);
        assert_eq!(&b[16..20], &[3, 0, 0, 0]);
    }

    #[test]
    fn wrong_magic_and_version_are_format_errors() {
        let seq = FeatureSequence {
            frames: vec![FrameFeatures::zeros()],
            label_id: None,
            signer_id: 0,
            gloss: None,
        };
        let mut b = encode_record(&seq).unwrap();
        b[0] = b'X';
        assert!(matches!(
            decode_record(&b, Path::new("m")),
            Err(Error::Format { .. })
        ));
        let mut b = encode_record(&seq).unwrap();
        b[4] = 9;
        assert!(matches!(
            decode_record(&b, Path::new("m")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncation_is_corrupt_record() {
        let seq = FeatureSequence {
            frames: vec![FrameFeatures::zeros(); 3],
            label_id: Some(1),
            signer_id: 0,
            gloss: None,
        };
        let b = encode_record(&seq).unwrap();
        for cut in [10, HEADER_LEN + 5, b.len() - 1] {
            assert!(matches!(
                decode_record(&b[..cut], Path::new("m")),
                Err(Error::CorruptRecord { .. })
            ));
        }
    }
}
