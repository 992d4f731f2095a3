//! Segment Selection (SS) matrices and the coalition plans derived from them.
//!
//! Rows are segment levels, columns are groups (or `(group, subgroup)`
//! pairs in the heterogeneous layout). A cell is either `Star`, meaning the
//! column encodes that segment alone with its own quantizer, or a label
//! shared by exactly two columns in the row, meaning those two columns
//! encode the segment together with the quantizer of the lower one.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// Largest column count accepted by the exhaustive subset scans.
pub const MAX_BRUTE_FORCE_COLUMNS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("need at least 2 columns, got {0}")]
    TooFewColumns(usize),

    #[error("subgroup list is empty")]
    EmptySubgroups,

    #[error("group {0} has zero subgroups")]
    ZeroSubgroups(usize),

    #[error("{columns} columns is too many for an exhaustive scan (max {max})")]
    TooManyColumns { columns: usize, max: usize },
}

/// Identity of one column: group `g` and subgroup `d` within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ColumnId {
    pub group: usize,
    pub subgroup: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Cell {
    Star,
    Label(ColumnId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SsMatrix {
    subgroups: Vec<usize>,
    columns: Vec<ColumnId>,
    cells: Vec<Vec<Cell>>,
}

fn columns_for(subgroups: &[usize]) -> Vec<ColumnId> {
    subgroups
        .iter()
        .enumerate()
        .flat_map(|(group, &count)| (0..count).map(move |subgroup| ColumnId { group, subgroup }))
        .collect()
}

/// The `G x G` matrix for `G` equal groups.
pub fn build_ss_matrix(groups: usize) -> Result<SsMatrix, PlanError> {
    if groups < 2 {
        return Err(PlanError::TooFewColumns(groups));
    }
    let subgroups = vec![1; groups];
    let columns = columns_for(&subgroups);
    let mut cells = vec![vec![Cell::Star; groups]; groups];
    for g in 0..groups - 1 {
        for r in 0..groups - g - 1 {
            let row = (2 * g + r) % groups;
            let label = Cell::Label(columns[g]);
            cells[row][g] = label;
            cells[row][g + r + 1] = label;
        }
    }
    Ok(SsMatrix {
        subgroups,
        columns,
        cells,
    })
}

/// The `Z x Z` matrix for groups split into `subgroups[g]`
/// equal-size subgroups, `Z = sum(subgroups)`.
///
/// Column `(g, d)` sits at flat position `Z_{g-1} + d`. It pairs with the
/// columns that follow it one by one, stepping across group boundaries, and
/// writes the pair at row `(2 (Z_{g-1} + d) + r) mod Z`.
pub fn build_ss_matrix_hetero(subgroups: &[usize]) -> Result<SsMatrix, PlanError> {
    if subgroups.is_empty() {
        return Err(PlanError::EmptySubgroups);
    }
    if let Some(g) = subgroups.iter().position(|&l| l == 0) {
        return Err(PlanError::ZeroSubgroups(g));
    }
    let z: usize = subgroups.iter().sum();
    if z < 2 {
        return Err(PlanError::TooFewColumns(z));
    }
    let groups = subgroups.len();
    let columns = columns_for(subgroups);
    let mut cells = vec![vec![Cell::Star; z]; z];

    let mut preceding = 0; // Z_{g-1}
    for g in 0..groups {
        let last_group = usize::from(g == groups - 1);
        for d in 0..subgroups[g] - last_group {
            let own = preceding + d;
            let label = Cell::Label(ColumnId { group: g, subgroup: d });
            // Partner cursor (group g + i, subgroup s), advanced one column per step.
            let (mut i, mut s) = (0, d);
            for r in 0..z - own - 1 {
                s += 1;
                if s == subgroups[g + i] {
                    i += 1;
                    s = 0;
                }
                let row = (2 * own + r) % z;
                let partner = flat_index(subgroups, g + i, s);
                debug_assert_eq!(partner, own + r + 1);
                cells[row][own] = label;
                cells[row][partner] = label;
            }
        }
        preceding += subgroups[g];
    }
    Ok(SsMatrix {
        subgroups: subgroups.to_vec(),
        columns,
        cells,
    })
}

fn flat_index(subgroups: &[usize], group: usize, subgroup: usize) -> usize {
    subgroups[..group].iter().sum::<usize>() + subgroup
}

impl SsMatrix {
    /// `Z`: number of rows and of columns.
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn subgroups(&self) -> &[usize] {
        &self.subgroups
    }

    pub fn group_count(&self) -> usize {
        self.subgroups.len()
    }

    pub fn columns(&self) -> &[ColumnId] {
        &self.columns
    }

    pub fn cell(&self, level: usize, column: usize) -> Cell {
        self.cells[level][column]
    }

    pub fn row(&self, level: usize) -> &[Cell] {
        &self.cells[level]
    }

    /// True when every group has a single subgroup (the plain layout).
    pub fn is_uniform(&self) -> bool {
        self.subgroups.iter().all(|&l| l == 1)
    }

    /// Copy with one cell overwritten; used to inject faults.
    pub fn with_cell(&self, level: usize, column: usize, cell: Cell) -> SsMatrix {
        let mut out = self.clone();
        out.cells[level][column] = cell;
        out
    }

    pub fn coalition_plan(&self) -> CoalitionPlan {
        let levels = self
            .cells
            .iter()
            .map(|row| {
                let mut coalitions: Vec<Coalition> = Vec::new();
                for (col, cell) in row.iter().enumerate() {
                    match cell {
                        Cell::Star => coalitions.push(Coalition {
                            columns: vec![col],
                            quantizer: self.columns[col].group,
                            label: None,
                        }),
                        Cell::Label(label) => match coalitions.iter_mut().find(|c| c.label == Some(*label)) {
                            Some(existing) => existing.columns.push(col),
                            None => coalitions.push(Coalition {
                                columns: vec![col],
                                quantizer: label.group,
                                label: Some(*label),
                            }),
                        },
                    }
                }
                coalitions
            })
            .collect();
        CoalitionPlan {
            columns: self.columns.clone(),
            levels,
        }
    }

    fn label_text(&self, id: ColumnId, csv: bool) -> String {
        match (self.is_uniform(), csv) {
            (true, _) => id.group.to_string(),
            (false, false) => format!("({},{})", id.group, id.subgroup),
            (false, true) => format!("{}:{}", id.group, id.subgroup),
        }
    }

    fn cell_text(&self, cell: Cell, csv: bool) -> String {
        match cell {
            Cell::Star => "*".to_string(),
            Cell::Label(id) => self.label_text(id, csv),
        }
    }

    /// One header line of column labels, then one line per level.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level");
        for &c in &self.columns {
            out.push(',');
            out.push_str(&self.label_text(c, true));
        }
        out.push('\n');
        for (l, row) in self.cells.iter().enumerate() {
            out.push_str(&l.to_string());
            for &cell in row {
                out.push(',');
                out.push_str(&self.cell_text(cell, true));
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for SsMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = if self.is_uniform() { 2 } else { 6 };
        write!(f, "{:>5} |", "")?;
        for &c in &self.columns {
            write!(f, " {:>width$}", self.label_text(c, false))?;
        }
        writeln!(f)?;
        for (l, row) in self.cells.iter().enumerate() {
            write!(f, "{l:>5} |")?;
            for &cell in row {
                write!(f, " {:>width$}", self.cell_text(cell, false))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Columns that encode one segment level together.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Coalition {
    /// Member column indices, ascending.
    pub columns: Vec<usize>,
    /// Group index of the quantizer used, the lowest member group.
    pub quantizer: usize,
    /// Shared label, `None` for a Star (single-column) coalition.
    pub label: Option<ColumnId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CoalitionPlan {
    columns: Vec<ColumnId>,
    levels: Vec<Vec<Coalition>>,
}

impl CoalitionPlan {
    /// A single-level plan where every column forms one coalition, i.e. the
    /// baseline protocol without segmentation.
    pub fn single_coalition(columns: Vec<ColumnId>) -> Self {
        let quantizer = columns.iter().map(|c| c.group).min().unwrap_or(0);
        Self {
            levels: vec![vec![Coalition {
                columns: (0..columns.len()).collect(),
                quantizer,
                label: None,
            }]],
            columns,
        }
    }

    pub fn columns(&self) -> &[ColumnId] {
        &self.columns
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, level: usize) -> &[Coalition] {
        &self.levels[level]
    }

    pub fn levels(&self) -> &[Vec<Coalition>] {
        &self.levels
    }

    /// Index within `level` of the coalition containing `column`.
    pub fn coalition_of(&self, level: usize, column: usize) -> usize {
        self.levels[level]
            .iter()
            .position(|c| c.columns.contains(&column))
            .expect("coalitions partition the columns at every level")
    }

    /// Structural shape: per level, the member column sets and quantizer
    /// groups, ignoring labels.
    pub fn shape(&self) -> Vec<Vec<(Vec<usize>, usize)>> {
        self.levels
            .iter()
            .map(|lvl| {
                let mut v: Vec<_> = lvl.iter().map(|c| (c.columns.clone(), c.quantizer)).collect();
                v.sort();
                v
            })
            .collect()
    }
}

/// Outcome of one property check with the coordinates that broke it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Check {
    pub holds: bool,
    pub violations: Vec<Violation>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub rows: Vec<usize>,
    pub columns: Vec<usize>,
    pub detail: String,
}

impl Check {
    fn from(violations: Vec<Violation>) -> Self {
        Self {
            holds: violations.is_empty(),
            violations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PropertyReport {
    /// Every label occurs exactly twice in its row.
    pub labels_pair_up: Check,
    /// Exactly one Star per column.
    pub one_star_per_column: Check,
    /// Two columns share a label in at most one row.
    pub columns_pair_once: Check,
    /// Star placement per row (odd vs even dimension).
    pub star_layout: Check,
    /// A row made only of pairs inside an even column set leaves
    /// every other row of that set with a split coalition.
    pub paired_rows_isolated: Check,
}

impl PropertyReport {
    pub fn all_hold(&self) -> bool {
        self.labels_pair_up.holds
            && self.one_star_per_column.holds
            && self.columns_pair_once.holds
            && self.star_layout.holds
            && self.paired_rows_isolated.holds
    }
}

impl fmt::Display for PropertyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let items = [
            ("labels pair up", &self.labels_pair_up),
            ("one star per column", &self.one_star_per_column),
            ("columns pair at most once", &self.columns_pair_once),
            ("star layout", &self.star_layout),
            ("paired rows isolate", &self.paired_rows_isolated),
        ];
        for (name, check) in items {
            writeln!(f, "{:<40} {}", name, if check.holds { "ok" } else { "FAILED" })?;
            for v in check.violations.iter().take(5) {
                writeln!(f, "    rows {:?} columns {:?}: {}", v.rows, v.columns, v.detail)?;
            }
        }
        Ok(())
    }
}

/// Check the structural properties of an SS matrix. Never fails; problems
/// are reported with coordinates. The paired-row check is scanned exhaustively and
/// skipped (reported as holding vacuously) above `MAX_BRUTE_FORCE_COLUMNS`.
pub fn verify_properties(matrix: &SsMatrix) -> PropertyReport {
    let z = matrix.dim();

    let mut pairing = Vec::new();
    for l in 0..z {
        for c in 0..z {
            if let Cell::Label(label) = matrix.cell(l, c) {
                let holders: Vec<usize> = (0..z).filter(|&k| matrix.cell(l, k) == Cell::Label(label)).collect();
                if holders.len() != 2 && holders[0] == c {
                    pairing.push(Violation {
                        rows: vec![l],
                        columns: holders.clone(),
                        detail: format!("label held by {} columns", holders.len()),
                    });
                }
            }
        }
    }

    let mut p1 = Vec::new();
    for c in 0..z {
        let stars: Vec<usize> = (0..z).filter(|&l| matrix.cell(l, c) == Cell::Star).collect();
        if stars.len() != 1 {
            p1.push(Violation {
                rows: stars.clone(),
                columns: vec![c],
                detail: format!("{} stars in column", stars.len()),
            });
        }
    }

    let mut p2 = Vec::new();
    for a in 0..z {
        for b in a + 1..z {
            let shared: Vec<usize> = (0..z)
                .filter(|&l| matches!(matrix.cell(l, a), Cell::Label(_)) && matrix.cell(l, a) == matrix.cell(l, b))
                .collect();
            if shared.len() > 1 {
                p2.push(Violation {
                    rows: shared,
                    columns: vec![a, b],
                    detail: "columns share a label in more than one row".into(),
                });
            }
        }
    }

    let mut p3 = Vec::new();
    for l in 0..z {
        let stars: Vec<usize> = (0..z).filter(|&c| matrix.cell(l, c) == Cell::Star).collect();
        let ok = if z % 2 == 1 {
            stars.len() == 1
        } else if l % 2 == 0 {
            stars.is_empty()
        } else {
            stars.len() == 2 && stars[1] == stars[0] + z / 2
        };
        if !ok {
            p3.push(Violation {
                rows: vec![l],
                columns: stars,
                detail: "unexpected star placement".into(),
            });
        }
    }

    let p4 = if z <= MAX_BRUTE_FORCE_COLUMNS {
        property_four(matrix)
    } else {
        Vec::new()
    };

    PropertyReport {
        labels_pair_up: Check::from(pairing),
        one_star_per_column: Check::from(p1),
        columns_pair_once: Check::from(p2),
        star_layout: Check::from(p3),
        paired_rows_isolated: Check::from(p4),
    }
}

/// Per-row coalition masks over the column bitset.
fn row_masks(matrix: &SsMatrix) -> Vec<Vec<u32>> {
    matrix
        .coalition_plan()
        .levels()
        .iter()
        .map(|lvl| {
            lvl.iter()
                .map(|c| c.columns.iter().fold(0u32, |m, &col| m | 1 << col))
                .collect()
        })
        .collect()
}

fn bits_to_columns(mask: u32, z: usize) -> Vec<usize> {
    (0..z).filter(|c| mask >> c & 1 == 1).collect()
}

fn property_four(matrix: &SsMatrix) -> Vec<Violation> {
    let z = matrix.dim();
    let masks = row_masks(matrix);
    let offset = if z.is_multiple_of(2) { 2 } else { 1 };
    let max_n = z.saturating_sub(offset) / 2;
    let mut out = Vec::new();
    for subset in 1u32..(1u32 << z) {
        let size = subset.count_ones() as usize;
        if size % 2 == 1 || size < 4 || size / 2 > max_n {
            continue;
        }
        for (row, coalitions) in masks.iter().enumerate() {
            // Row consists only of pairs fully inside the subset.
            let only_pairs = coalitions
                .iter()
                .filter(|&&m| m & subset != 0)
                .all(|&m| m.count_ones() == 2 && m & subset == m);
            if !only_pairs {
                continue;
            }
            for (other, others) in masks.iter().enumerate() {
                if other == row {
                    continue;
                }
                let split = others.iter().any(|&m| m & subset != 0 && m & subset != m);
                if !split {
                    out.push(Violation {
                        rows: vec![row, other],
                        columns: bits_to_columns(subset, z),
                        detail: "second row fully decodable for a paired column set".into(),
                    });
                }
            }
        }
    }
    out
}

/// Fraction `alpha_S` of levels whose aggregate over `subset` the server can
/// decode: every coalition at that level lies entirely inside or outside it.
pub fn decodable_fraction(matrix: &SsMatrix, subset: &[usize]) -> f64 {
    let mask = subset.iter().fold(0u64, |m, &c| m | 1 << c);
    let plan = matrix.coalition_plan();
    let decodable = plan
        .levels()
        .iter()
        .filter(|lvl| {
            lvl.iter().all(|c| {
                let cm = c.columns.iter().fold(0u64, |m, &col| m | 1 << col);
                cm & mask == 0 || cm & mask == cm
            })
        })
        .count();
    decodable as f64 / matrix.dim() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessReport {
    /// `delta = undecodable / levels`.
    pub delta: f64,
    pub undecodable: usize,
    pub levels: usize,
    /// One proper column subset attaining the minimum.
    pub subset: Vec<usize>,
}

/// Exhaustive inference robustness: the minimum over nonempty proper column
/// subsets `S` of `1 - alpha_S`.
pub fn inference_robustness_bruteforce(matrix: &SsMatrix) -> Result<RobustnessReport, PlanError> {
    let z = matrix.dim();
    if z > MAX_BRUTE_FORCE_COLUMNS {
        return Err(PlanError::TooManyColumns {
            columns: z,
            max: MAX_BRUTE_FORCE_COLUMNS,
        });
    }
    let masks = row_masks(matrix);
    let full = (1u32 << z) - 1;
    let mut best = (usize::MAX, 0u32);
    for subset in 1..full {
        let decodable = masks
            .iter()
            .filter(|row| row.iter().all(|&m| m & subset == 0 || m & subset == m))
            .count();
        let undecodable = z - decodable;
        if undecodable < best.0 {
            best = (undecodable, subset);
        }
    }
    Ok(RobustnessReport {
        delta: best.0 as f64 / z as f64,
        undecodable: best.0,
        levels: z,
        subset: bits_to_columns(best.1, z),
    })
}

/// `(Z - 2) / Z` for even `Z`, `(Z - 1) / Z` for odd `Z`.
pub fn inference_robustness_closed_form(z: usize) -> f64 {
    if z == 0 {
        return 0.0;
    }
    let hidden = if z.is_multiple_of(2) { z - 2 } else { z - 1 };
    hidden as f64 / z as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Parse a row written as a matrix row: `*` or a group number.
    fn uniform_row(text: &str) -> Vec<Cell> {
        text.split_whitespace()
            .map(|t| match t {
                "*" => Cell::Star,
                g => Cell::Label(ColumnId {
                    group: g.parse().unwrap(),
                    subgroup: 0,
                }),
            })
            .collect()
    }

    fn hetero_row(text: &str) -> Vec<Cell> {
        text.split_whitespace()
            .map(|t| match t {
                "*" => Cell::Star,
                pair => {
                    let (g, d) = pair.split_once(',').unwrap();
                    Cell::Label(ColumnId {
                        group: g.parse().unwrap(),
                        subgroup: d.parse().unwrap(),
                    })
                }
            })
            .collect()
    }

    fn assert_rows(m: &SsMatrix, rows: &[Vec<Cell>]) {
        assert_eq!(m.dim(), rows.len());
        for (l, row) in rows.iter().enumerate() {
            assert_eq!(m.row(l), row.as_slice(), "row {l}");
        }
    }

    #[test]
    fn five_groups_reference_layout() {
        let m = build_ss_matrix(5).unwrap();
        let rows: Vec<_> = ["0 0 2 * 2", "0 * 0 3 3", "0 1 1 0 *", "0 1 * 1 0", "* 1 2 2 1"]
            .iter()
            .map(|r| uniform_row(r))
            .collect();
        assert_rows(&m, &rows);
    }

    #[test]
    fn six_groups_reference_layout() {
        let m = build_ss_matrix(6).unwrap();
        let rows: Vec<_> = [
            "0 0 2 3 3 2",
            "0 * 0 3 * 3",
            "0 1 1 0 4 4",
            "0 1 * 1 0 *",
            "0 1 2 2 1 0",
            "* 1 2 * 2 1",
        ]
        .iter()
        .map(|r| uniform_row(r))
        .collect();
        assert_rows(&m, &rows);
    }

    #[test]
    fn three_groups_hand_trace() {
        let m = build_ss_matrix(3).unwrap();
        let rows: Vec<_> = ["0 0 *", "0 * 0", "* 1 1"].iter().map(|r| uniform_row(r)).collect();
        assert_rows(&m, &rows);
    }

    #[test]
    fn subgrouped_reference_layout() {
        let m = build_ss_matrix_hetero(&[1, 2, 2]).unwrap();
        let rows: Vec<_> = [
            "0,0 0,0 1,1 * 1,1",
            "0,0 * 0,0 2,0 2,0",
            "0,0 1,0 1,0 0,0 *",
            "0,0 1,0 * 1,0 0,0",
            "* 1,0 1,1 1,1 1,0",
        ]
        .iter()
        .map(|r| hetero_row(r))
        .collect();
        assert_rows(&m, &rows);
    }

    #[test]
    fn unit_subgroups_reduce_to_uniform_plan() {
        for g in 2..=10 {
            let a = build_ss_matrix(g).unwrap();
            let b = build_ss_matrix_hetero(&vec![1; g]).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.coalition_plan().shape(), b.coalition_plan().shape());
        }
    }

    #[test]
    fn config_errors() {
        assert_eq!(build_ss_matrix(1), Err(PlanError::TooFewColumns(1)));
        assert_eq!(build_ss_matrix_hetero(&[]), Err(PlanError::EmptySubgroups));
        assert_eq!(build_ss_matrix_hetero(&[1, 0]), Err(PlanError::ZeroSubgroups(1)));
        assert_eq!(build_ss_matrix_hetero(&[1]), Err(PlanError::TooFewColumns(1)));
    }

    fn structural_checks_hold(report: &PropertyReport) -> bool {
        report.labels_pair_up.holds
            && report.one_star_per_column.holds
            && report.columns_pair_once.holds
            && report.star_layout.holds
    }

    #[test]
    fn structural_properties_hold_for_generated_matrices() {
        for g in 2..=10 {
            let report = verify_properties(&build_ss_matrix(g).unwrap());
            assert!(structural_checks_hold(&report), "G = {g}\n{report}");
        }
        let layouts: [&[usize]; 8] = [
            &[2, 2],
            &[1, 2, 2],
            &[3, 1],
            &[2, 3, 1],
            &[1, 1, 4],
            &[4, 4],
            &[2, 2, 2, 2, 1],
            &[5],
        ];
        for l in layouts {
            let report = verify_properties(&build_ss_matrix_hetero(l).unwrap());
            assert!(structural_checks_hold(&report), "L = {l:?}\n{report}");
        }
    }

    #[test]
    fn paired_row_isolation_by_group_count() {
        for g in [2, 3, 4, 5, 7] {
            let report = verify_properties(&build_ss_matrix(g).unwrap());
            assert!(report.all_hold(), "G = {g}\n{report}");
        }
        // From six groups on, some even column sets have two rows made only
        // of pairs inside the set; at G = 6, rows 0 and 3 over {0, 1, 3, 4}.
        for g in [6, 8, 9, 10] {
            let report = verify_properties(&build_ss_matrix(g).unwrap());
            assert!(!report.paired_rows_isolated.holds, "G = {g}");
        }
        let six = verify_properties(&build_ss_matrix(6).unwrap());
        assert!(six
            .paired_rows_isolated
            .violations
            .iter()
            .any(|v| v.rows == vec![0, 3] && v.columns == vec![0, 1, 3, 4]));
    }

    #[test]
    fn even_star_pairs_for_six_groups() {
        let m = build_ss_matrix(6).unwrap();
        let pairs: Vec<(usize, Vec<usize>)> = (0..6)
            .map(|l| (l, (0..6).filter(|&c| m.cell(l, c) == Cell::Star).collect()))
            .filter(|(_, s): &(usize, Vec<usize>)| !s.is_empty())
            .collect();
        assert_eq!(pairs, vec![(1, vec![1, 4]), (3, vec![2, 5]), (5, vec![0, 3])]);
    }

    #[test]
    fn injected_fault_is_reported() {
        let m = build_ss_matrix(5).unwrap();
        let broken = m.with_cell(0, 1, Cell::Label(ColumnId { group: 1, subgroup: 0 }));
        let report = verify_properties(&broken);
        assert!(!report.all_hold());
        let v = &report.labels_pair_up.violations;
        assert!(v.iter().any(|v| v.rows == vec![0] && v.columns.contains(&1)));
    }

    #[test]
    fn coalition_quantizer_is_lowest_member_group() {
        for l in [vec![1, 1, 1, 1, 1], vec![1, 2, 2], vec![2, 3, 1], vec![3, 3]] {
            let m = build_ss_matrix_hetero(&l).unwrap();
            let plan = m.coalition_plan();
            for level in plan.levels() {
                let mut seen: Vec<usize> = level.iter().flat_map(|c| c.columns.clone()).collect();
                seen.sort();
                assert_eq!(seen, (0..m.dim()).collect::<Vec<_>>());
                for c in level {
                    let min = c.columns.iter().map(|&k| m.columns()[k].group).min().unwrap();
                    assert_eq!(c.quantizer, min);
                    assert!(c.columns.len() == 1 || c.columns.len() == 2);
                }
            }
        }
    }

    #[test]
    fn single_group_decodes_only_its_star_row() {
        let m = build_ss_matrix(5).unwrap();
        assert!((decodable_fraction(&m, &[0]) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn robustness_examples() {
        let five = inference_robustness_bruteforce(&build_ss_matrix(5).unwrap()).unwrap();
        assert_eq!(five.delta, 0.8);
        assert_eq!(inference_robustness_closed_form(5), 0.8);
        assert_eq!(inference_robustness_closed_form(6), 4.0 / 6.0);
        assert_eq!(inference_robustness_closed_form(2), 0.0);
    }

    #[test]
    fn brute_force_matches_closed_form_for_small_odd_counts() {
        for g in [3, 5, 7] {
            let r = inference_robustness_bruteforce(&build_ss_matrix(g).unwrap()).unwrap();
            assert_eq!(r.delta, inference_robustness_closed_form(g), "G = {g}");
        }
        for l in [vec![1, 2, 2], vec![2, 3, 2], vec![1, 1, 1, 2, 2]] {
            let m = build_ss_matrix_hetero(&l).unwrap();
            let r = inference_robustness_bruteforce(&m).unwrap();
            assert_eq!(r.delta, inference_robustness_closed_form(m.dim()), "L = {l:?}");
        }
    }

    #[test]
    fn even_counts_leak_half_through_alternate_columns() {
        // The alternate columns {0, 2, 4, ...} decode every Star row: on
        // those rows each labelled pair lies entirely on one side.
        for g in [2, 4, 6, 8, 10] {
            let m = build_ss_matrix(g).unwrap();
            let r = inference_robustness_bruteforce(&m).unwrap();
            assert_eq!(r.delta, 0.5, "G = {g}");
            let alternate: Vec<usize> = (0..g).step_by(2).collect();
            assert_eq!(decodable_fraction(&m, &alternate), 0.5, "G = {g}");
        }
    }

    #[test]
    fn nine_groups_leak_a_third_through_a_stride_three_set() {
        let m = build_ss_matrix(9).unwrap();
        let r = inference_robustness_bruteforce(&m).unwrap();
        assert_eq!(r.undecodable, 6);
        assert!((decodable_fraction(&m, &[0, 3, 6]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn two_groups_each_decode_their_star() {
        // With two columns the only proper subsets are single groups, each of
        // which decodes its Star level: delta is 1/2, not (2 - 2) / 2.
        let r = inference_robustness_bruteforce(&build_ss_matrix(2).unwrap()).unwrap();
        assert_eq!(r.delta, 0.5);
    }

    #[test]
    fn brute_force_refuses_wide_matrices() {
        let m = build_ss_matrix(21).unwrap();
        assert!(matches!(
            inference_robustness_bruteforce(&m),
            Err(PlanError::TooManyColumns { .. })
        ));
    }

    #[test]
    fn csv_and_text_layouts() {
        let m = build_ss_matrix(3).unwrap();
        assert_eq!(m.to_csv(), "level,0,1,2\n0,0,0,*\n1,0,*,0\n2,*,1,1\n");
        let text = m.to_string();
        assert!(text.lines().nth(3).unwrap().ends_with("*  1  1"));
        let h = build_ss_matrix_hetero(&[1, 2]).unwrap();
        assert!(h.to_csv().starts_with("level,0:0,1:0,1:1\n"));
    }
}
