"""
Static SVG 1.1 charts written as plain markup: no plotting library, no scripts,
no external references. Output is deterministic for equal input.
"""
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PREAMBLE = """\
<?xml version="1.0" standalone="no"?>
<!DOCTYPE svg PUBLIC "-//W3C//DTD SVG 1.1//EN"
"http://www.w3.org/Graphics/SVG/1.1/DTD/svg11.dtd">
<svg width="%(width)d" height="%(height)d" viewBox="0 0 %(width)d %(height)d" version="1.1"
    xmlns="http://www.w3.org/2000/svg">
<rect x="0" y="0" width="%(width)d" height="%(height)d" style="fill:#ffffff"/>
"""

POSTAMBLE = "</svg>\n"

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


class SvgCanvas:
    def __init__(self, width: int = 720, height: int = 420):
        self.width = width
        self.height = height
        self.commands = []

    def render(self) -> str:
        width, height = self.width, self.height
        return PREAMBLE % locals() + "".join(c + "\n" for c in self.commands) + POSTAMBLE

    def save(self, filename) -> Path:
        path = Path(filename)
        path.write_text(self.render(), encoding="utf-8")
        return path

    def rect(self, x, y, w, h, fill="#1f77b4"):
        self.commands.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" style="fill:{fill}"/>')

    def line(self, points, color="#000000", width=1.0, dash=None):
        dash_style = f";stroke-dasharray:{dash}" if dash else ""
        self.commands.append(
            '<polyline points="%s" style="fill:none;stroke:%s;stroke-width:%.2f%s"/>' % (
                " ".join("%.2f,%.2f" % p for p in points), color, width, dash_style)
        )

    def circle(self, x, y, radius=3.0, fill="#1f77b4"):
        self.commands.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{radius:.2f}" style="fill:{fill};stroke:none"/>')

    def text(self, x, y, text, size=11, anchor="start", color="#333333", rotate=None):
        transform = f' transform="rotate({rotate} {x:.2f} {y:.2f})"' if rotate is not None else ""
        self.commands.append(
            f'<text x="{x:.2f}" y="{y:.2f}" fill="{color}" font-size="{size}" font-family="sans-serif" '
            f'text-anchor="{anchor}"{transform}>{escape(str(text))}</text>'
        )


class _Axis:
    """Linear map from data range onto a pixel span, padded by 5%."""

    def __init__(self, lo, hi, px_lo, px_hi):
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        pad = 0.05 * (hi - lo)
        self.lo, self.hi = lo - pad, hi + pad
        self.px_lo, self.px_hi = px_lo, px_hi

    def __call__(self, v):
        return self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)

    def ticks(self, n=5):
        return np.linspace(self.lo, self.hi, n)


def _frame(canvas, title, x_label, y_label, left, top, right, bottom):
    canvas.text(canvas.width / 2, 22, title, size=14, anchor="middle")
    canvas.line([(left, top), (left, bottom), (right, bottom)], width=1.2)
    canvas.text((left + right) / 2, canvas.height - 10, x_label, anchor="middle")
    canvas.text(16, (top + bottom) / 2, y_label, anchor="middle", rotate=-90)


def _y_ticks(canvas, axis, left):
    for value in axis.ticks():
        y = axis(value)
        canvas.line([(left - 4, y), (left, y)])
        canvas.text(left - 6, y + 4, f"{value:.3f}", size=9, anchor="end")


# ----------------------------------
# BAR CHART
# ----------------------------------
def bar_chart(groups: dict, title: str = "Lowest validation losses per variant",
              y_label: str = "validation loss") -> SvgCanvas:
    """
    Grouped bars, one group per variant; each group's values are drawn sorted ascending.
    `groups` maps variant → list of values.
    """
    canvas = SvgCanvas()
    left, top, right, bottom = 70, 40, canvas.width - 20, canvas.height - 60
    _frame(canvas, title, "variant", y_label, left, top, right, bottom)

    values = [v for vs in groups.values() for v in vs]
    if not values:
        return canvas
    y = _Axis(min(0.0, min(values)), max(values), bottom, top)
    _y_ticks(canvas, y, left)

    slot = (right - left) / len(groups)
    for g, (name, vs) in enumerate(groups.items()):
        vs = sorted(vs)
        bar_w = 0.8 * slot / max(len(vs), 1)
        x0 = left + g * slot + 0.1 * slot
        for i, v in enumerate(vs):
            y_top, y_base = y(v), y(0.0)
            canvas.rect(x0 + i * bar_w, min(y_top, y_base), bar_w * 0.9, abs(y_base - y_top),
                        fill=PALETTE[g % len(PALETTE)])
        canvas.text(left + (g + 0.5) * slot, bottom + 16, name, size=9, anchor="middle")
    return canvas


# ----------------------------------
# SCATTER
# ----------------------------------
def median_split(values):
    """
    Boolean mask of the left panel: the ⌈n/2⌉ smallest values (ties broken by position).
    With n points, ⌈n/2⌉ land left and ⌊n/2⌋ right.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    left = np.zeros(n, dtype=bool)
    order = np.argsort(values, kind="stable")
    left[order[:(n + 1) // 2]] = True
    return left


def split_scatter(points: dict, title: str = "Validation vs clean training loss",
                  x_label: str = "validation loss", y_label: str = "training loss (clean)") -> SvgCanvas:
    """
    Scatter of (val_loss, train_loss) per variant in two panels, split at the
    median val_loss. `points` maps variant → list of (x, y).
    """
    canvas = SvgCanvas(width=900)
    top, bottom = 40, canvas.height - 60
    panels = [(70, 440), (510, 880)]

    names = list(points)
    flat = [(name, x, y) for name in names for x, y in points[name]]
    canvas.text(canvas.width / 2, 22, title, size=14, anchor="middle")
    if not flat:
        return canvas

    xs = np.array([p[1] for p in flat])
    ys = np.array([p[2] for p in flat])
    on_left = median_split(xs)
    median = float(np.median(xs))

    for side, (left, right) in enumerate(panels):
        chosen = on_left if side == 0 else ~on_left
        # halves by rank: points tied at the median may sit in either panel
        half = "lower" if side == 0 else "upper"
        label = f"{half} half by val_loss (median {median:.3f})"
        canvas.line([(left, top), (left, bottom), (right, bottom)], width=1.2)
        canvas.text((left + right) / 2, top - 4, label, size=10, anchor="middle")
        canvas.text((left + right) / 2, canvas.height - 10, x_label, anchor="middle")
        if not chosen.any():
            continue
        x_axis = _Axis(xs[chosen].min(), xs[chosen].max(), left, right)
        y_axis = _Axis(ys.min(), ys.max(), bottom, top)
        _y_ticks(canvas, y_axis, left)
        for (name, x, y_val), keep in zip(flat, chosen):
            if keep:
                canvas.circle(x_axis(x), y_axis(y_val), fill=PALETTE[names.index(name) % len(PALETTE)])
    canvas.text(16, (top + bottom) / 2, y_label, anchor="middle", rotate=-90)

    # legend
    for i, name in enumerate(names):
        canvas.circle(panels[1][1] - 120, top + 12 + 14 * i, fill=PALETTE[i % len(PALETTE)])
        canvas.text(panels[1][1] - 112, top + 16 + 14 * i, name, size=9)
    return canvas
