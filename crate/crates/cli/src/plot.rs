use std::fmt::Write as _;

use bionet::train::History;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn polyline(points: &[(f64, f64)], colour: &str) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!(
        "  <polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>\n",
        pts.join(" ")
    )
}

/// Training loss (left axis) and validation mIoU (right axis) per epoch.
pub fn curve_svg(history: &History) -> String {
    let n = history.records.len();
    let max_loss = history
        .records
        .iter()
        .map(|r| r.train_loss)
        .filter(|l| l.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let span = (n.max(2) - 1) as f64;
    let x = |e: usize| PAD + (W - 2.0 * PAD) * e as f64 / span;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v.clamp(0.0, 1.0);
    let loss: Vec<(f64, f64)> = history.records.iter().map(|r| (x(r.epoch), y(r.train_loss / max_loss))).collect();
    let miou: Vec<(f64, f64)> = history.records.iter().map(|r| (x(r.epoch), y(r.val_miou))).collect();

    let mut s = String::new();
    let _ = writeln!(s, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(s, "  <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "  <path d=\"M{PAD},{PAD} V{b} H{r} V{PAD}\" fill=\"none\" stroke=\"#444\"/>",
        b = H - PAD,
        r = W - PAD
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            s,
            "  <text x=\"{lx:.2}\" y=\"{yy:.2}\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>",
            v * max_loss,
            lx = PAD - 4.0,
            yy = y(v) + 4.0
        );
        let _ = writeln!(
            s,
            "  <text x=\"{rx:.2}\" y=\"{yy:.2}\" font-size=\"11\">{v:.2}</text>",
            rx = W - PAD + 4.0,
            yy = y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        "  <text x=\"{cx}\" y=\"{by}\" font-size=\"12\" text-anchor=\"middle\">epoch (0..{})</text>",
        n.saturating_sub(1),
        cx = W / 2.0,
        by = H - 12.0
    );
    let _ = writeln!(s, "  <text x=\"{PAD}\" y=\"20\" font-size=\"12\" fill=\"#c0392b\">train loss</text>");
    let _ = writeln!(
        s,
        "  <text x=\"{rx}\" y=\"20\" font-size=\"12\" fill=\"#2471a3\" text-anchor=\"end\">val mIoU</text>",
        rx = W - PAD
    );
    if n > 0 {
        s.push_str(&polyline(&loss, "#c0392b"));
        s.push_str(&polyline(&miou, "#2471a3"));
    }
    s.push_str("</svg>\n");
    s
}
