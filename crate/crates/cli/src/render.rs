use std::fmt::Write as _;
use std::path::Path;

use versa_core::motion::{
    joints_from_features, project_sequence, read_motion, BONES_2D, NUM_JOINTS_2D,
};
use versa_core::{PoseSequence2D, Result};

/// A pose file (`VP2D1`) as is, or a motion file projected to the image plane.
pub fn load_poses(path: &Path) -> Result<PoseSequence2D> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"VP2D1") {
        let text = String::from_utf8_lossy(&bytes);
        return PoseSequence2D::from_text(&text);
    }
    let motion = read_motion(path)?;
    Ok(project_sequence(&joints_from_features(&motion)?))
}

/// Frame `t` as an SVG document in the unit square.
pub fn frame_svg(seq: &PoseSequence2D, t: usize) -> String {
    let mut s = String::new();
    s.push_str("<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 1 1\" width=\"512\" height=\"512\">\n");
    s.push_str("<rect x=\"0\" y=\"0\" width=\"1\" height=\"1\" fill=\"white\"/>\n");
    s.push_str("<g stroke=\"black\" stroke-width=\"0.008\" stroke-linecap=\"round\">\n");
    for &(p, c) in &BONES_2D {
        let (a, b) = (seq.joint(t, p), seq.joint(t, c));
        let _ = writeln!(
            s,
            "<line x1=\"{:.6}\" y1=\"{:.6}\" x2=\"{:.6}\" y2=\"{:.6}\"/>",
            a[0], a[1], b[0], b[1]
        );
    }
    s.push_str("</g>\n<g fill=\"crimson\">\n");
    for j in 0..NUM_JOINTS_2D {
        let p = seq.joint(t, j);
        let _ = writeln!(
            s,
            "<circle cx=\"{:.6}\" cy=\"{:.6}\" r=\"0.008\"/>",
            p[0], p[1]
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:05}.svg")
}
