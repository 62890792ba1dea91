//! Plain-text tables and summaries printed by the commands.

use std::fmt::Write as _;

/// Right-aligns every column except the first.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::new();
        for (i, cell) in cells.enumerate().take(cols) {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 0 {
                let _ = write!(s, "{cell:<w$}", w = width[0]);
            } else {
                let _ = write!(s, "{cell:>w$}", w = width[i]);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(&mut header.iter().copied());
    out.push('\n');
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(&mut row.iter().map(String::as_str)));
        out.push('\n');
    }
    out
}

/// Counts indexed `[true][predicted]`.
pub fn confusion_matrix(pred: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &y) in pred.iter().zip(labels) {
        if p < classes && y < classes {
            m[y][p] += 1;
        }
    }
    m
}

pub fn format_confusion(m: &[Vec<usize>]) -> String {
    let k = m.len();
    let mut header: Vec<String> = vec!["true\\pred".into()];
    header.extend((0..k).map(|c| c.to_string()));
    header.push("recall".into());
    let rows: Vec<Vec<String>> = m
        .iter()
        .enumerate()
        .map(|(y, row)| {
            let total: usize = row.iter().sum();
            let mut cells = vec![y.to_string()];
            cells.extend(row.iter().map(|c| c.to_string()));
            cells.push(if total == 0 {
                "-".into()
            } else {
                format!("{:.3}", row[y] as f64 / total as f64)
            });
            cells
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    table(&header, &rows)
}

pub fn percent(acc: f64) -> String {
    format!("{:.2}", 100.0 * acc)
}

/// CPU model, logical cores and kernel thread count.
pub fn machine_descriptor(threads: usize) -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}; {cores} logical cores; {threads} kernel thread(s); {}-{}",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_aligns_columns() {
        let t = table(
            &["method", "acc"],
            &[vec!["proto".into(), "97.80".into()], vec!["elm".into(), "9.1".into()]],
        );
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "method    acc");
        assert_eq!(lines[2], "proto   97.80");
        assert_eq!(lines[3], "elm       9.1");
    }

    #[test]
    fn confusion_counts_by_true_class() {
        let m = confusion_matrix(&[0, 1, 1, 2], &[0, 1, 2, 2], 3);
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 1, 1]]);
        let text = format_confusion(&m);
        assert!(text.lines().last().unwrap().ends_with("0.500"));
    }
}
