//! Writes a volume and a label map as single-file NIfTI-1, reads them back
//! and prints the header fields and the largest voxel change.
//!
//! `cargo run --release --example nifti_roundtrip -- [dir]`

use std::path::PathBuf;

use deformreg::grid::{LabelMap, Volume};
use deformreg::io::nifti::{read_labels, read_nifti, read_volume, write_labels, write_volume};

fn main() -> deformreg::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().to_string_lossy().into_owned()));
    let dims = [20, 16, 12];
    let v = Volume::from_fn(dims, |p| (p[0] as f64 * 0.3).sin() + (p[1] as f64 * 0.2).cos() * p[2] as f64).with_spacing([0.9, 1.1, 2.5])?;
    let s = LabelMap::from_fn(dims, 3, |p| ((p[0] / 7 + p[2] / 5) % 3) as u32)?;

    let (vp, sp) = (dir.join("roundtrip_image.nii"), dir.join("roundtrip_labels.nii"));
    write_volume(&v, &vp)?;
    write_labels(&s, &sp)?;

    let header = read_nifti(&vp)?.header;
    println!("dims {:?}  spacing {:?}  datatype {}  bitpix {}", header.dims(), header.spacing(), header.datatype, header.bitpix);
    let back = read_volume(&vp)?;
    let worst = v.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("largest voxel change {worst:.2e} (float32 storage)");
    println!("labels identical: {}", read_labels(&sp, Some(3))? == s);
    Ok(())
}
