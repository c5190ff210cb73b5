#!/usr/bin/env python3
"""From a raw CSV to model-ready windows: schema inference, calendar
decomposition, normalized time features, and sliding-window samples."""

import tempfile
from pathlib import Path

from tabaconv import synth
from tabaconv.schema import (
    decompose_timestamp,
    group_rows_by_user,
    infer_schema,
    make_windows,
    read_csv,
    time_floats,
)

workdir = Path(tempfile.mkdtemp())
cfg = synth.SynthConfig(n_users=4, rows_per_user=25, fraud_rate=0.04, seed=1)
csv_path, manifest_path = synth.generate(cfg, workdir)
print("generated", csv_path)

schema = infer_schema(csv_path, synth.default_roles())
print("\n== inferred schema ==")
for f in schema.fields:
    extra = ""
    if f.kind == "categorical":
        extra = f"vocab={f.vocab_size()} (ids 0/1 reserved for PAD/MASK)"
    elif f.kind == "continuous":
        extra = f"mean={f.mean:.2f} std={f.std:.2f}"
    print(f"  {f.name:12s} {f.kind:12s} {extra}")
print("time span:", schema.t_min, "->", schema.t_max)

ts = schema.t_min
print("\n== timestamp decomposition ==")
year, month, day, weekday, week, hour, minute, second = decompose_timestamp(ts)
print(f"epoch {ts} -> {year}-{month:02d}-{day:02d}, weekday {weekday} (Mon=0), "
      f"ISO week {week}, {hour:02d}:{minute:02d}:{second:02d}")
print("normalized time features:", [round(v, 4) for v in time_floats(ts, schema)])

header, rows = read_csv(csv_path)
grouped = group_rows_by_user(header, rows, schema)
pre = make_windows(schema, header, grouped, window=10, stride=5, mode="pretrain")
down = make_windows(schema, header, grouped, window=10, stride=10, mode="downstream")
print("\n== windowing ==")
print(f"{len(rows)} rows -> {len(pre)} pretraining windows (W=10, S=5, labels stripped)")
print(f"{len(rows)} rows -> {len(down)} downstream windows (W=10, S=10, label = any row fraudulent)")
w = pre[0]
print("one window:", w.cat_tokens.shape, "categorical tokens,",
      w.cont_values.shape, "z-scored values,", w.ts_components.shape, "calendar components")
