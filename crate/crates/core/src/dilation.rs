//! Serial dilated convolution planning.
//!
//! `hdc_distances` evaluates the maximum-distance recursion
//! `M_i = max(M_{i+1} - 2 r_i, M_{i+1} - 2 (M_{i+1} - r_i), r_i)` with
//! `M_n = r_n`, and `coverage_map` counts how many tap paths of the stacked
//! convolutions land on each input cell.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Rates proposed when none are configured.
pub const DEFAULT_RATES: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DilationPlan {
    pub rates: Vec<usize>,
    pub kernel: usize,
    pub max_distances: Vec<usize>,
}

impl DilationPlan {
    pub fn new(rates: &[usize], kernel: usize) -> Result<Self> {
        Ok(Self {
            rates: rates.to_vec(),
            kernel,
            max_distances: hdc_distances(rates, kernel)?,
        })
    }

    pub fn check(&self) -> HdcVerdict {
        verdict(&self.rates, &self.max_distances, self.kernel)
    }
}

fn validate(rates: &[usize], kernel: usize) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::invalid("hdc", "rate sequence is empty"));
    }
    if let Some(r) = rates.iter().find(|&&r| r == 0) {
        return Err(Error::invalid("hdc", format!("rate {r} must be >= 1")));
    }
    if kernel < 3 || kernel % 2 == 0 {
        return Err(Error::invalid("hdc", format!("kernel must be odd and >= 3, got {kernel}")));
    }
    Ok(())
}

/// `[M_1, ..., M_n]`, evaluated from `M_n = r_n` downwards.
pub fn hdc_distances(rates: &[usize], kernel: usize) -> Result<Vec<usize>> {
    validate(rates, kernel)?;
    let n = rates.len();
    let mut m = vec![0i64; n];
    m[n - 1] = rates[n - 1] as i64;
    for i in (0..n - 1).rev() {
        let (next, r) = (m[i + 1], rates[i] as i64);
        m[i] = (next - 2 * r).max(next - 2 * (next - r)).max(r);
    }
    Ok(m.into_iter().map(|v| v as usize).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HdcVerdict {
    pub pass: bool,
    /// `M_2`, absent for single-layer sequences.
    pub m2: Option<usize>,
    pub kernel: usize,
    pub first_rate: usize,
}

fn verdict(rates: &[usize], m: &[usize], kernel: usize) -> HdcVerdict {
    let m2 = m.get(1).copied();
    let pass = match m2 {
        None => true,
        // the recursion presumes a unit first layer that fills gaps up to K
        Some(m2) => rates[0] == 1 && m2 <= kernel,
    };
    HdcVerdict {
        pass,
        m2,
        kernel,
        first_rate: rates[0],
    }
}

/// Passes when `r_1 = 1` and `M_2 <= K`; single-layer sequences pass vacuously.
pub fn hdc_check(rates: &[usize], kernel: usize) -> Result<HdcVerdict> {
    let m = hdc_distances(rates, kernel)?;
    Ok(verdict(rates, &m, kernel))
}

/// Path counts on a square input window centred on one output cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageMap {
    pub size: usize,
    pub counts: Vec<u64>,
}

impl CoverageMap {
    pub fn get(&self, y: usize, x: usize) -> u64 {
        self.counts[y * self.size + x]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Inclusive bounding box `(y0, x0, y1, x1)` of nonzero cells.
    pub fn extent(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.size {
            for x in 0..self.size {
                if self.get(y, x) == 0 {
                    continue;
                }
                bb = Some(match bb {
                    None => (y, x, y, x),
                    Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                });
            }
        }
        bb
    }

    /// Zero cells inside the bounding box of the nonzero ones.
    pub fn hole_count(&self) -> usize {
        let Some((y0, x0, y1, x1)) = self.extent() else {
            return 0;
        };
        (y0..=y1)
            .flat_map(|y| (x0..=x1).map(move |x| (y, x)))
            .filter(|&(y, x)| self.get(y, x) == 0)
            .count()
    }

    pub fn has_holes(&self) -> bool {
        self.hole_count() > 0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("# dronedet coverage-map v1\n");
        for y in 0..self.size {
            let row: Vec<String> = (0..self.size).map(|x| self.get(y, x).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Monochrome heat map: white for zero, darker for more paths.
    pub fn to_svg(&self, cell_px: usize) -> String {
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1);
        let side = self.size * cell_px;
        let mut svg = String::new();
        let _ = writeln!(svg, "<!-- dronedet coverage-map v1 -->");
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" viewBox="0 0 {side} {side}">"#
        );
        for y in 0..self.size {
            for x in 0..self.size {
                let c = self.get(y, x);
                let shade = 255 - (c * 255 / max) as u8;
                let _ = writeln!(
                    svg,
                    r##"<rect x="{}" y="{}" width="{cell_px}" height="{cell_px}" fill="rgb({shade},{shade},{shade})" stroke="#888" stroke-width="0.5"/>"##,
                    x * cell_px,
                    y * cell_px,
                );
            }
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Half-width of the stacked receptive field: `(K/2) * sum(r)`.
pub fn reach(rates: &[usize], kernel: usize) -> usize {
    kernel / 2 * rates.iter().sum::<usize>()
}

/// Counts, for the centre output cell of `grid_size x grid_size`, the tap paths
/// of the serial stride-1 convolutions reaching each input cell.
pub fn coverage_map(rates: &[usize], kernel: usize, grid_size: usize) -> Result<CoverageMap> {
    validate(rates, kernel)?;
    let need = 2 * reach(rates, kernel) + 1;
    if grid_size < need {
        return Err(Error::invalid(
            "coverage_map",
            format!("grid size {grid_size} cannot hold receptive field of side {need}"),
        ));
    }
    let n = grid_size;
    let centre = n / 2;
    let half = (kernel / 2) as i64;
    let mut counts = vec![0u64; n * n];
    counts[centre * n + centre] = 1;
    for &r in rates {
        let mut next = vec![0u64; n * n];
        for y in 0..n {
            for x in 0..n {
                let c = counts[y * n + x];
                if c == 0 {
                    continue;
                }
                for dy in -half..=half {
                    for dx in -half..=half {
                        let ty = y as i64 + dy * r as i64;
                        let tx = x as i64 + dx * r as i64;
                        next[ty as usize * n + tx as usize] += c;
                    }
                }
            }
        }
        counts = next;
    }
    Ok(CoverageMap { size: n, counts })
}

/// Smallest lexicographic strictly increasing sequence of `depth` rates that
/// passes [`hdc_check`] and leaves no holes in its coverage map.
pub fn plan_rates(depth: usize, kernel: usize) -> Vec<usize> {
    if depth <= 1 {
        return vec![1];
    }
    let bound = depth * kernel;
    let mut seq = Vec::with_capacity(depth);
    search(&mut seq, depth, kernel, bound).unwrap_or_else(|| (1..=depth).collect())
}

fn search(seq: &mut Vec<usize>, depth: usize, kernel: usize, bound: usize) -> Option<Vec<usize>> {
    if seq.len() == depth {
        let ok = hdc_check(seq, kernel).map(|v| v.pass).unwrap_or(false)
            && coverage_map(seq, kernel, 2 * reach(seq, kernel) + 1)
                .map(|m| !m.has_holes())
                .unwrap_or(false);
        return ok.then(|| seq.clone());
    }
    let start = seq.last().map_or(1, |&r| r + 1);
    for r in start..=bound {
        seq.push(r);
        if let Some(found) = search(seq, depth, kernel, bound) {
            return Some(found);
        }
        seq.pop();
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Enumerates every tap tuple explicitly.
    fn brute_force(rates: &[usize], kernel: usize, size: usize) -> Vec<u64> {
        let half = (kernel / 2) as i64;
        let taps: Vec<i64> = (-half..=half).collect();
        let mut counts = vec![0u64; size * size];
        let c = (size / 2) as i64;
        let n = rates.len();
        let combos = taps.len().pow(2 * n as u32);
        for mut code in 0..combos {
            let (mut y, mut x) = (c, c);
            for &r in rates {
                y += taps[code % taps.len()] * r as i64;
                code /= taps.len();
                x += taps[code % taps.len()] * r as i64;
                code /= taps.len();
            }
            counts[y as usize * size + x as usize] += 1;
        }
        counts
    }

    #[test]
    fn distances_hand_evaluated() {
        assert_eq!(hdc_distances(&[5], 3).unwrap(), vec![5]);
        // M3 = 3; M2 = max(3-4, 3-2, 2) = 2; M1 = max(0, 0, 1) = 1
        assert_eq!(hdc_distances(&[1, 2, 3], 3).unwrap(), vec![1, 2, 3]);
        // M3 = 4; M2 = max(0, 0, 2) = 2; M1 = max(0, 0, 1) = 1
        assert_eq!(hdc_distances(&[1, 2, 4], 3).unwrap(), vec![1, 2, 4]);
        // M3 = 9; M2 = max(5, -5, 2) = 5
        assert_eq!(hdc_distances(&[1, 2, 9], 3).unwrap()[1], 5);
        assert!(hdc_distances(&[], 3).is_err());
        assert!(hdc_distances(&[1], 4).is_err());
    }

    #[test]
    fn distances_are_order_sensitive() {
        let a = hdc_distances(&[1, 2, 3], 3).unwrap();
        let b = hdc_distances(&[2, 1, 3], 3).unwrap();
        assert_ne!(a[1], b[1]);
    }

    #[test]
    fn check_examples() {
        assert!(hdc_check(&[1, 2, 3], 3).unwrap().pass);
        assert!(hdc_check(&[1, 1, 1], 3).unwrap().pass);
        let v = hdc_check(&[3, 3, 3], 3).unwrap();
        assert!(!v.pass);
        assert_eq!((v.m2, v.first_rate), (Some(3), 3));
        assert!(!hdc_check(&[1, 2, 9], 3).unwrap().pass);
        let single = hdc_check(&[7], 3).unwrap();
        assert!(single.pass && single.m2.is_none());
    }

    #[test]
    fn coverage_single_unit_conv() {
        let m = coverage_map(&[1], 3, 5).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let inner = (1..=3).contains(&y) && (1..=3).contains(&x);
                assert_eq!(m.get(y, x), u64::from(inner));
            }
        }
        assert!(!m.has_holes());
    }

    #[test]
    fn coverage_matches_brute_force() {
        for rates in [vec![1, 2, 3], vec![1, 2, 4], vec![3, 3, 3], vec![2, 1], vec![1, 2, 5]] {
            let size = 2 * reach(&rates, 3) + 3;
            let m = coverage_map(&rates, 3, size).unwrap();
            assert_eq!(m.counts, brute_force(&rates, 3, size), "{rates:?}");
            assert_eq!(m.total(), 3u64.pow(2 * rates.len() as u32));
        }
    }

    #[test]
    fn gridding_sequences_have_holes() {
        assert!(coverage_map(&[3, 3, 3], 3, 19).unwrap().has_holes());
        assert!(coverage_map(&[2, 2, 2], 3, 13).unwrap().has_holes());
        assert!(!coverage_map(&[1, 2, 3], 3, 13).unwrap().has_holes());
    }

    #[test]
    fn coverage_rejects_small_grid() {
        assert!(coverage_map(&[1, 2, 3], 3, 12).is_err());
    }

    #[test]
    fn passing_sequences_are_hole_free() {
        for depth in 2..=4u32 {
            for code in 0..4usize.pow(depth) {
                let rates: Vec<usize> = (0..depth).map(|i| code / 4usize.pow(i) % 4 + 1).collect();
                if hdc_check(&rates, 3).unwrap().pass {
                    let m = coverage_map(&rates, 3, 2 * reach(&rates, 3) + 1).unwrap();
                    assert!(!m.has_holes(), "{rates:?}");
                }
            }
        }
    }

    #[test]
    fn planner_examples() {
        assert_eq!(plan_rates(1, 3), vec![1]);
        assert_eq!(plan_rates(2, 3), vec![1, 2]);
        assert_eq!(plan_rates(3, 3), vec![1, 2, 3]);
    }

    #[test]
    fn planner_agrees_with_exhaustive_search() {
        // every strictly increasing tuple over 1..=5, in lexicographic order
        for depth in 2..=3usize {
            let mut tuples: Vec<Vec<usize>> = Vec::new();
            for code in 0..5usize.pow(depth as u32) {
                let t: Vec<usize> = (0..depth)
                    .rev()
                    .map(|i| code / 5usize.pow(i as u32) % 5 + 1)
                    .collect();
                if t.windows(2).all(|w| w[0] < w[1]) {
                    tuples.push(t);
                }
            }
            tuples.sort();
            let first = tuples
                .into_iter()
                .find(|t| {
                    let size = 2 * reach(t, 3) + 1;
                    // the window is exactly the field's extent, so any zero is a hole
                    hdc_check(t, 3).unwrap().pass && !brute_force(t, 3, size).contains(&0)
                })
                .unwrap();
            assert_eq!(plan_rates(depth, 3), first);
        }
    }

    #[test]
    fn csv_and_svg_render() {
        let m = coverage_map(&[1], 3, 3).unwrap();
        assert_eq!(m.to_csv(), "# dronedet coverage-map v1\n1,1,1\n1,1,1\n1,1,1\n");
        assert_eq!(m.to_svg(4).matches("<rect").count(), 9);
    }
}
