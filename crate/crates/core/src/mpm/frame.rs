//! Particle frame CSV output: `id,x0,x1,v0,v1,material`.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::mpm::particles::{MaterialKind, ParticleSet};

fn material_name(k: MaterialKind) -> &'static str {
    match k {
        MaterialKind::Elastic => "elastic",
        MaterialKind::Plastic => "plastic",
        MaterialKind::Liquid => "liquid",
    }
}

pub fn write_frame<W: Write>(ps: &ParticleSet, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["id", "x0", "x1", "v0", "v1", "material"])?;
    for p in 0..ps.len() {
        let x = ps.state.x[p];
        let v = ps.state.v[p];
        wr.write_record([
            p.to_string(),
            x.x.to_string(),
            x.y.to_string(),
            v.x.to_string(),
            v.y.to_string(),
            material_name(ps.props.material[p].kind).to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_frame_file(ps: &ParticleSet, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_frame(ps, std::io::BufWriter::new(f))
}
