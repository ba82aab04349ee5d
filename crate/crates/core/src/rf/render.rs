//! Sample-position dumps: CSV rows and plain-text graymap grids.

use super::{enumerate_samples, AnalysisError, BoundingBox, Offset, SamplePositionSet};
use crate::netspec::GraphSpec;
use std::fmt::Write;

pub const MARKED: u8 = 255;

/// `dx,dy` rows in row-major order, with a header line.
pub fn samples_csv(set: &SamplePositionSet) -> String {
    let mut out = String::from("dx,dy\n");
    for o in set.iter() {
        writeln!(out, "{},{}", o.dx, o.dy).expect("write to string");
    }
    out
}

/// P2 graymap of `frame`: sampled cells are [`MARKED`], the rest 0.
pub fn samples_pgm(set: &SamplePositionSet, frame: BoundingBox) -> String {
    let (w, h) = (frame.width(), frame.height());
    let mut out = format!("P2\n{w} {h}\n{MARKED}\n");
    for y in frame.min_y..=frame.max_y {
        let row: Vec<&str> = (frame.min_x..=frame.max_x)
            .map(|x| if set.contains(Offset::new(x, y)) { "255" } else { "0" })
            .collect();
        writeln!(out, "{}", row.join(" ")).expect("write to string");
    }
    out
}

/// Files for one graph: a CSV and a graymap per branch plus the union, all
/// drawn on the union's bounding box so the panels line up.
pub fn render_graph(g: &GraphSpec) -> Result<Vec<(String, String)>, AnalysisError> {
    let e = enumerate_samples(g)?;
    let union = e.branch_union();
    let frame = union.bbox().unwrap_or(BoundingBox {
        min_x: 0,
        max_x: 0,
        min_y: 0,
        max_y: 0,
    });
    let mut files = Vec::new();
    for (b, set) in &e.branches {
        files.push((format!("branch{b}.csv"), samples_csv(set)));
        files.push((format!("branch{b}.pgm"), samples_pgm(set, frame)));
    }
    files.push(("union.csv".to_string(), samples_csv(&union)));
    files.push(("union.pgm".to_string(), samples_pgm(&union, frame)));
    Ok(files)
}

/// Counts marked cells in a P2 graymap produced by [`samples_pgm`].
pub fn count_marked(pgm: &str) -> usize {
    pgm.lines()
        .skip(3)
        .flat_map(|l| l.split_whitespace())
        .filter(|v| *v == "255")
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{build_aspp, build_serial};

    #[test]
    fn single_conv_is_solid_block() {
        let files = render_graph(&build_serial(&[(3, 1)], 1).unwrap()).unwrap();
        let pgm = &files.iter().find(|(n, _)| n == "union.pgm").unwrap().1;
        assert_eq!(pgm, "P2\n3 3\n255\n255 255 255\n255 255 255\n255 255 255\n");
    }

    #[test]
    fn aspp_render_counts() {
        let files = render_graph(&build_aspp(&[1, 12, 24, 36], 2, 2).unwrap()).unwrap();
        let pgm = &files.iter().find(|(n, _)| n == "union.pgm").unwrap().1;
        assert!(pgm.starts_with("P2\n73 73\n255\n"));
        assert_eq!(count_marked(pgm), 33);
        let csv = &files.iter().find(|(n, _)| n == "union.csv").unwrap().1;
        assert_eq!(csv.lines().count(), 34);
        let b1 = &files.iter().find(|(n, _)| n == "branch1.pgm").unwrap().1;
        assert_eq!(count_marked(b1), 9);
        assert_eq!(files.len(), 10);
    }
}
