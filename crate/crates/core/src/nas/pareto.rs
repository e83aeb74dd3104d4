use serde::Serialize;

/// One scored architecture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParetoPoint {
    pub id: usize,
    pub iou: f64,
    pub macs: u64,
}

/// `p` is at least as good on both axes and strictly better on one.
pub fn dominates(p: &ParetoPoint, q: &ParetoPoint) -> bool {
    p.iou >= q.iou && p.macs <= q.macs && (p.iou > q.iou || p.macs < q.macs)
}

/// Non-dominated points ranked by IoU (descending, then MACs, then id),
/// truncated to `cap` when given.
pub fn pareto_front(points: &[ParetoPoint], cap: Option<usize>) -> Vec<ParetoPoint> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.macs.cmp(&b.macs).then(b.iou.total_cmp(&a.iou)));
    let mut front = Vec::new();
    let mut best_cheaper = f64::NEG_INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let macs = sorted[i].macs;
        let top = sorted[i].iou;
        let mut j = i;
        while j < sorted.len() && sorted[j].macs == macs {
            if sorted[j].iou == top && top > best_cheaper {
                front.push(sorted[j]);
            }
            j += 1;
        }
        best_cheaper = best_cheaper.max(top);
        i = j;
    }
    front.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.macs.cmp(&b.macs)).then(a.id.cmp(&b.id)));
    if let Some(c) = cap {
        front.truncate(c);
    }
    front
}
