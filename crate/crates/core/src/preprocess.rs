//! Fixed-length, masked three-stream batches from variable-length records.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;

use crate::featurestore::{
    FeatureSequence, FrameFeatures, HandCenter, ARM_POINTS_DIM, HAND_SHAPE_DIM, LIP_SHAPE_DIM,
};

pub const DEFAULT_SEQ_LEN: usize = 40;
pub const STREAM_A_DIM: usize = HAND_SHAPE_DIM;
pub const STREAM_B_DIM: usize = LIP_SHAPE_DIM;
pub const STREAM_C_DIM: usize = ARM_POINTS_DIM + 2;
pub const FUSED_INPUT_DIM: usize = STREAM_A_DIM + STREAM_B_DIM + STREAM_C_DIM;

/// Stand-in center for a hand that has never been seen: bottom-center of the image.
pub const UNSEEN_HAND_CENTER: HandCenter = HandCenter { x: 0.5, y: 1.0 };

/// Three aligned streams of `T` rows plus the validity mask.
///
/// Real frames form a prefix; padded rows are all-zero in every stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    /// Hand shape, `T x 126`.
    pub stream_a: Array2<f32>,
    /// Lip shape, `T x 120`.
    pub stream_b: Array2<f32>,
    /// Arm points then (distance, angle), `T x 14`.
    pub stream_c: Array2<f32>,
    pub mask: Vec<bool>,
}

impl StreamBatch {
    pub fn seq_len(&self) -> usize {
        self.mask.len()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn streams(&self) -> [&Array2<f32>; 3] {
        [&self.stream_a, &self.stream_b, &self.stream_c]
    }

    /// Per-frame concatenation `[A | B | C]`, `T x 260`.
    pub fn fused(&self) -> Array2<f32> {
        concatenate(
            Axis(1),
            &[
                self.stream_a.view(),
                self.stream_b.view(),
                self.stream_c.view(),
            ],
        )
        .expect("streams share the row count")
    }

    /// Zeroes every stream whose toggle is off.
    pub fn with_toggles(&self, toggles: [bool; 3]) -> Self {
        let mut out = self.clone();
        for (on, s) in toggles
            .iter()
            .zip([&mut out.stream_a, &mut out.stream_b, &mut out.stream_c])
        {
            if !on {
                s.fill(0.0);
            }
        }
        out
    }

    /// Appends masked zero rows until the batch has `len` rows.
    pub fn padded_to(&self, len: usize) -> Self {
        let t = self.seq_len();
        assert!(len >= t, "cannot pad {t} rows down to {len}");
        let pad = |a: &Array2<f32>| {
            let mut out = Array2::zeros((len, a.ncols()));
            out.slice_mut(s![..t, ..]).assign(a);
            out
        };
        let mut mask = self.mask.clone();
        mask.resize(len, false);
        Self {
            stream_a: pad(&self.stream_a),
            stream_b: pad(&self.stream_b),
            stream_c: pad(&self.stream_c),
            mask,
        }
    }
}

/// Last observed center per hand.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HandTrackState {
    pub last: [Option<HandCenter>; 2],
}

/// Deletes random frames (keeping order) or zero-pads so the result has exactly `t` frames.
pub fn normalize_length<R: Rng + ?Sized>(
    seq: &FeatureSequence,
    t: usize,
    rng: &mut R,
) -> (FeatureSequence, Vec<bool>) {
    let keep = kept_indices(seq.len(), t, rng);
    let mut frames: Vec<FrameFeatures> = keep.iter().map(|&i| seq.frames[i].clone()).collect();
    let mut mask = vec![true; frames.len()];
    frames.resize_with(t, FrameFeatures::zeros);
    mask.resize(t, false);
    let out = FeatureSequence {
        frames,
        label_id: seq.label_id,
        signer_id: seq.signer_id,
        gloss: seq.gloss.clone(),
    };
    (out, mask)
}

/// Sorted indices of the frames that survive length normalization.
fn kept_indices<R: Rng + ?Sized>(len: usize, t: usize, rng: &mut R) -> Vec<usize> {
    if len <= t {
        return (0..len).collect();
    }
    let mut keep = rand::seq::index::sample(rng, len, t).into_vec();
    keep.sort_unstable();
    keep
}

/// Distance and angle between the two hand centers, with fallbacks for
/// undetected hands. The angle is that of the left-to-right segment in
/// image coordinates (y down), in `(-pi, pi]`.
pub fn hand_geometry(
    centers: [Option<HandCenter>; 2],
    state: HandTrackState,
) -> (f32, f32, HandTrackState) {
    let mut next = state;
    let mut eff = [UNSEEN_HAND_CENTER; 2];
    for hand in 0..2 {
        if let Some(c) = centers[hand] {
            next.last[hand] = Some(c);
        }
        eff[hand] = centers[hand]
            .or(state.last[hand])
            .unwrap_or(UNSEEN_HAND_CENTER);
    }
    let dx = eff[1].x - eff[0].x;
    let dy = eff[1].y - eff[0].y;
    let distance = dx.hypot(dy);
    let angle = if dx == 0.0 && dy == 0.0 {
        0.0
    } else {
        let a = dy.atan2(dx);
        if a <= -std::f32::consts::PI {
            std::f32::consts::PI
        } else {
            a
        }
    };
    (distance, angle, next)
}

/// Length-normalizes `seq` to `t` frames and splits it into the three streams.
///
/// Hand geometry is tracked over every input frame before deletion, so the
/// last-seen fallback reflects the full recording.
pub fn assemble_streams<R: Rng + ?Sized>(
    seq: &FeatureSequence,
    t: usize,
    rng: &mut R,
) -> StreamBatch {
    let mut state = HandTrackState::default();
    let geometry: Vec<(f32, f32)> = seq
        .frames
        .iter()
        .map(|f| {
            let (d, a, next) = hand_geometry(f.hand_centers, state);
            state = next;
            (d, a)
        })
        .collect();

    let keep = kept_indices(seq.len(), t, rng);
    let mut a = Array2::zeros((t, STREAM_A_DIM));
    let mut b = Array2::zeros((t, STREAM_B_DIM));
    let mut c = Array2::zeros((t, STREAM_C_DIM));
    for (row, &i) in keep.iter().enumerate() {
        let f = &seq.frames[i];
        a.row_mut(row).assign(&ndarray::aview1(&f.hand_shape));
        b.row_mut(row).assign(&ndarray::aview1(&f.lip_shape));
        let mut cr = c.row_mut(row);
        cr.slice_mut(s![..ARM_POINTS_DIM])
            .assign(&ndarray::aview1(&f.arm_points));
        cr[ARM_POINTS_DIM] = geometry[i].0;
        cr[ARM_POINTS_DIM + 1] = geometry[i].1;
    }
    let mut mask = vec![false; t];
    mask[..keep.len()].fill(true);
    StreamBatch {
        stream_a: a,
        stream_b: b,
        stream_c: c,
        mask,
    }
}
