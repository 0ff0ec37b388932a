//! CSV outputs. Every file starts with a versioned schema line, uses
//! comma separators, dot decimals and UTF-8. Results carry an explicit
//! regime marker: toy-scale numbers are not comparable in magnitude to
//! any published full-scale results.

use std::fmt::Write as _;

use voplab_core::eval::RetrievalReport;
use voplab_core::protocols::ParameterLedger;

pub const REGIME: &str = "toy-scale-not-comparable";

pub fn ledger_csv(rows: &[(String, ParameterLedger)]) -> String {
    let mut out = String::new();
    out.push_str("# schema: voplab/ledger/v1\n");
    out.push_str("method,trainable,total,percent_vs_119.8M,percent_vs_reconstructed\n");
    for (method, ledger) in rows {
        writeln!(
            out,
            "{},{},{},{:.3},{:.3}",
            method,
            ledger.trainable_total,
            ledger.model_total,
            ledger.percent,
            ledger.percent_of_model()
        )
        .unwrap();
    }
    out
}

fn metric_cells(r: &RetrievalReport) -> String {
    format!(
        "{:.1},{:.1},{:.1},{:.1},{:.1}",
        r.recall(1).unwrap_or(f64::NAN),
        r.recall(5).unwrap_or(f64::NAN),
        r.recall(10).unwrap_or(f64::NAN),
        r.mean_rank,
        r.median_rank
    )
}

/// Final training report mirroring the usual table layout: one row per
/// direction with R@1/5/10, MnR, MdR.
pub fn report_csv(
    method: &str,
    trainable: usize,
    t2v: &RetrievalReport,
    v2t: &RetrievalReport,
) -> String {
    let mut out = String::new();
    out.push_str("# schema: voplab/report/v1\n");
    out.push_str("method,params_trainable,direction,r1,r5,r10,mnr,mdr,regime\n");
    for r in [t2v, v2t] {
        writeln!(
            out,
            "{},{},{},{},{}",
            method,
            trainable,
            r.direction.name(),
            metric_cells(r),
            REGIME
        )
        .unwrap();
    }
    out
}

pub struct SweepRow {
    pub value: String,
    pub trainable: usize,
    pub t2v: RetrievalReport,
    pub v2t: RetrievalReport,
    pub note: String,
}

pub fn sweep_csv(axis: &str, rows: &[SweepRow]) -> String {
    let mut out = String::new();
    out.push_str("# schema: voplab/ablate/v1\n");
    out.push_str(
        "axis,value,params_trainable,t2v_r1,t2v_r5,t2v_r10,t2v_mnr,t2v_mdr,\
         v2t_r1,v2t_r5,v2t_r10,v2t_mnr,v2t_mdr,note,regime\n",
    );
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            axis,
            row.value,
            row.trainable,
            metric_cells(&row.t2v),
            metric_cells(&row.v2t),
            row.note,
            REGIME
        )
        .unwrap();
    }
    out
}
