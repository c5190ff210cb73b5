"""Acceptance suite: one test per release criterion, each printing a PASS line.

The heavyweight fixtures (synthetic benchmark, seed sweeps) are shared
module-wide so the whole suite stays inside its runtime budgets.
"""

import datetime as dt
import math
import time

import numpy as np
import pytest

from tabaconv import synth
from tabaconv import tensor as tt
from tabaconv.cli import main
from tabaconv.errors import IntegrityError
from tabaconv.masking import MaskConfig, sample_mask_plan
from tabaconv.model import ModelConfig, forward_mdm, mha
from tabaconv.schema import (
    decompose_timestamp,
    group_rows_by_user,
    infer_schema,
    make_windows,
    parse_iso8601,
    read_csv,
    split_users,
    users_in_order,
    window_count,
)
from tabaconv.tensor import Tensor, use_dtype
from tabaconv.training import (
    TrainConfig,
    evaluate,
    finetune,
    load_checkpoint,
    masked_batch,
    mdm_batch_stats,
    mdm_loss,
    pretrain,
    save_checkpoint,
    stack_batch,
)


def report(name: str, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# shared benchmark fixtures
# ---------------------------------------------------------------------------


def load_benchmark(root):
    cfg = synth.SynthConfig(n_users=200, rows_per_user=200, fraud_rate=0.05,
                            label_noise=0.05, seed=0)
    t0 = time.time()
    csv_path, manifest_path = synth.generate(cfg, root)
    gen_seconds = time.time() - t0
    bound = synth.bayes_f1_bound(csv_path, manifest_path)
    roles = synth.default_roles()
    header, rows = read_csv(csv_path)
    users = users_in_order(header, rows, "user_id")
    train_users, _, test_users = split_users(users)
    schema = infer_schema(csv_path, roles, include_users=set(train_users))
    rows_tr = [r for r in rows if r[0] in set(train_users)]
    rows_te = [r for r in rows if r[0] in set(test_users)]
    grouped_tr = group_rows_by_user(header, rows_tr, schema)
    grouped_te = group_rows_by_user(header, rows_te, schema)
    return {
        "csv": csv_path,
        "bound": bound,
        "schema": schema,
        "gen_seconds": gen_seconds,
        "pretrain_windows": make_windows(schema, header, grouped_tr, 10, 5, "pretrain"),
        "train_windows": make_windows(schema, header, grouped_tr, 10, 10, "downstream"),
        "test_windows": make_windows(schema, header, grouped_te, 10, 10, "downstream"),
    }


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    return load_benchmark(tmp_path_factory.mktemp("bench"))


@pytest.fixture(scope="module")
def bench_runs(bench):
    """Three seeds x {field+row pretrain, field-only pretrain, scratch} plus evals."""
    schema = bench["schema"]
    mcfg = ModelConfig()
    results = {"f1_finetuned": [], "f1_scratch": [], "f1_field_only": [],
               "stage_seconds": dict(gen=bench["gen_seconds"])}
    for seed in (0, 1, 2):
        tcfg = TrainConfig(epochs=5, batch_size=32, seed=seed)
        t0 = time.time()
        ckpt_fr, _ = pretrain(bench["pretrain_windows"], schema, mcfg, tcfg,
                              MaskConfig(p_field=0.30, p_row=0.15, seed=seed))
        t1 = time.time()
        tuned, _ = finetune(ckpt_fr, bench["train_windows"], schema,
                            TrainConfig(epochs=5, batch_size=32, seed=seed, mode="finetune"))
        t2 = time.time()
        results["f1_finetuned"].append(evaluate(tuned, bench["test_windows"], schema)["f1"])
        t3 = time.time()
        if seed == 0:
            results["stage_seconds"].update(pretrain=t1 - t0, finetune=t2 - t1, evaluate=t3 - t2)
        scratch, _ = finetune(ckpt_fr, bench["train_windows"], schema,
                              TrainConfig(epochs=5, batch_size=32, seed=seed, mode="scratch"))
        results["f1_scratch"].append(evaluate(scratch, bench["test_windows"], schema)["f1"])
        ckpt_f, _ = pretrain(bench["pretrain_windows"], schema, mcfg, tcfg,
                             MaskConfig(p_field=0.30, p_row=0.0, seed=seed))
        tuned_f, _ = finetune(ckpt_f, bench["train_windows"], schema,
                              TrainConfig(epochs=5, batch_size=32, seed=seed, mode="finetune"))
        results["f1_field_only"].append(evaluate(tuned_f, bench["test_windows"], schema)["f1"])
    return results


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_gradient_correctness():
    t0 = time.time()
    rc = main(["gradcheck"])  # full model, float64, dropout off, tol 1e-4
    elapsed = time.time() - t0
    report("gradient-correctness", rc == 0 and elapsed < 60,
           f"exit={rc}, runtime={elapsed:.1f}s < 60s")


def conv_oracle(x, w, bias, padding):
    batch, t_len, f_in = x.shape
    k, _, f_c = w.shape
    half = k // 2
    out = np.zeros((batch, t_len, f_c), dtype=x.dtype)
    for b in range(batch):
        for t in range(t_len):
            for c in range(f_c):
                acc = x.dtype.type(0.0)
                for tap in range(k):
                    src = t + tap - half
                    for f in range(f_in):
                        if padding == "circular":
                            xv = x[b, src % t_len, f]
                        elif 0 <= src < t_len:
                            xv = x[b, src, f]
                        else:
                            xv = x.dtype.type(0.0)
                        acc += xv * w[tap, f, c]
                out[b, t, c] = acc + bias[c]
    return out


def attention_oracle(x, wq, wk, wv, wmix, n_heads):
    b, t, _ = x.shape
    attn = wq.shape[1]
    dk = attn // n_heads
    out = np.zeros((b, t, attn), dtype=x.dtype)
    for bi in range(b):
        q, k, v = x[bi] @ wq, x[bi] @ wk, x[bi] @ wv
        merged = np.zeros((t, attn), dtype=x.dtype)
        for h in range(n_heads):
            sl = slice(h * dk, (h + 1) * dk)
            scores = q[:, sl] @ k[:, sl].T / math.sqrt(dk)
            for ti in range(t):
                row = np.exp(scores[ti] - scores[ti].max())
                merged[ti, sl] = (row / row.sum()) @ v[:, sl]
        out[bi] = merged @ wmix
    return out


def test_oracle_equivalence():
    worst_conv = 0.0
    worst_mha = 0.0
    with use_dtype("float64"):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(2, 10, 8))
            w = rng.normal(size=(3, 8, 8))
            b = rng.normal(size=8)
            for padding in ("zero", "circular"):
                got = tt.conv1d(Tensor(x), Tensor(w), Tensor(b), padding).data
                ref = conv_oracle(x, w, b, padding)
                worst_conv = max(worst_conv, float(np.abs(got - ref).max()))
            cfg = ModelConfig(d_model=8, n_heads=4, n_blocks=1, dropout=0.0)
            params = {f"block0.attn.{k}": Tensor(rng.normal(size=(8, 4) if k != "wmix" else (4, 4)))
                      for k in ("wq", "wk", "wv", "wmix")}
            got = mha(Tensor(x), params, cfg).data
            ref = attention_oracle(x, *(params[f"block0.attn.{k}"].data
                                        for k in ("wq", "wk", "wv", "wmix")), 4)
            worst_mha = max(worst_mha, float(np.abs(got - ref).max()))
    counts_ok = all(
        window_count(n, w_, s_) == sum(1 for o in range(0, n + 1, s_) if o + w_ <= n)
        for n in range(51) for w_ in range(1, 13) for s_ in range(1, 13)
    )
    report("oracle-equivalence",
           worst_conv < 1e-6 and worst_mha < 1e-6 and counts_ok,
           f"conv err {worst_conv:.2e}, mha err {worst_mha:.2e}, window formula exhaustive n<=50: {counts_ok}")


def test_equivariance_suite():
    with use_dtype("float64"):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(2, 10, 5))
        w = Tensor(rng.normal(size=(3, 5, 7)))
        b = Tensor(rng.normal(size=7))
        base = tt.conv1d(Tensor(x), w, b, "circular").data
        conv_err = max(
            float(np.abs(tt.conv1d(Tensor(np.roll(x, s, axis=1)), w, b, "circular").data
                         - np.roll(base, s, axis=1)).max())
            for s in range(1, 10)
        )
        cfg = ModelConfig(d_model=8, n_heads=4, n_blocks=1, dropout=0.0)
        params = {f"block0.attn.{k}": Tensor(rng.normal(size=(8, 4) if k != "wmix" else (4, 4)))
                  for k in ("wq", "wk", "wv", "wmix")}
        xa = rng.normal(size=(2, 10, 8))
        perm = rng.permutation(10)
        mha_err = float(np.abs(mha(Tensor(xa[:, perm]), params, cfg).data
                               - mha(Tensor(xa), params, cfg).data[:, perm]).max())
        soft = tt.softmax_lastdim(Tensor(rng.normal(scale=4, size=(6, 9, 11)))).data
        soft_err = float(np.abs(soft.sum(axis=-1) - 1.0).max())
    report("equivariance-suite",
           conv_err < 1e-6 and mha_err < 1e-6 and soft_err < 1e-6,
           f"conv shift err {conv_err:.2e}, mha perm err {mha_err:.2e}, softmax err {soft_err:.2e}")


def test_masking_statistics(tiny_env):
    schema_cols = 10
    from tabaconv.schema import FeatureSchema, FieldSpec

    fields = [FieldSpec(name=f"c{i}", kind="categorical", vocab={"a": 2}) for i in range(5)]
    fields += [FieldSpec(name=f"x{i}", kind="continuous", mean=0.0, std=1.0) for i in range(5)]
    schema = FeatureSchema(fields=fields, user_column="u", timestamp_column="t",
                           label_column=None, t_min=0, t_max=1)
    cfg = MaskConfig(p_field=0.30, p_row=0.15, seed=0)
    rng = np.random.default_rng(0)
    rows = rows_masked = 0
    outside_cells = outside_masked = 0
    implies_ok = True
    n_plans = 0
    while rows < 20_000 or outside_cells < 100_000:
        plan = sample_mask_plan(10, schema, cfg, rng)
        n_plans += 1
        implies_ok &= bool(plan.field_mask[plan.row_mask, :].all())
        rows += plan.row_mask.size
        rows_masked += int(plan.row_mask.sum())
        outside = ~plan.row_mask
        outside_cells += int(outside.sum()) * schema_cols
        outside_masked += int(plan.field_mask[outside].sum())
    field_rate = outside_masked / outside_cells
    row_rate = rows_masked / rows
    # bit-exact loss invariance at unmasked cells
    env_schema = tiny_env["schema"]
    batch = masked_batch(tiny_env["pretrain_samples"][:3], env_schema, MaskConfig(seed=9), 0, [0, 1, 2])
    gen = np.random.default_rng(3)
    cat_preds = {f.name: np.asarray(gen.normal(size=(3, 8, f.vocab_size())), dtype=np.float32)
                 for f in env_schema.categorical_fields}
    cont_preds = {f.name: np.asarray(gen.normal(size=(3, 8, 1)), dtype=np.float32)
                  for f in env_schema.continuous_fields}
    loss1 = mdm_loss({k: Tensor(v) for k, v in {**cat_preds, **cont_preds}.items()},
                     batch, Tensor(np.asarray(0.0)), env_schema)
    for c, f in enumerate(env_schema.categorical_fields):
        cat_preds[f.name][~batch.cat_mask[:, :, c]] += 55.5
    for c, f in enumerate(env_schema.continuous_fields):
        cont_preds[f.name][~batch.cont_mask[:, :, c]] -= 11.1
    loss2 = mdm_loss({k: Tensor(v) for k, v in {**cat_preds, **cont_preds}.items()},
                     batch, Tensor(np.asarray(0.0)), env_schema)
    bit_exact = loss1.data.tobytes() == loss2.data.tobytes()
    ok = (abs(field_rate - 0.30) <= 0.01 and abs(row_rate - 0.15) <= 0.01
          and implies_ok and bit_exact)
    report("masking-statistics", ok,
           f"field rate {field_rate:.4f} (0.30 +- 0.01 over {outside_cells} cells), "
           f"row rate {row_rate:.4f} (0.15 +- 0.01 over {rows} rows), "
           f"row-implies-field on {n_plans} plans: {implies_ok}, loss bit-exact: {bit_exact}")


def test_pretraining_signal(tmp_path):
    t0 = time.time()
    cfg = synth.SynthConfig(n_users=20, rows_per_user=500, fraud_rate=0.03,
                            label_noise=0.05, seed=0)
    csv_path, _ = synth.generate(cfg, tmp_path)
    roles = synth.default_roles()
    header, rows = read_csv(csv_path)
    train_users = set(split_users(users_in_order(header, rows, "user_id"))[0])
    schema = infer_schema(csv_path, roles, include_users=train_users)
    rows_tr = [r for r in rows if r[0] in train_users]
    samples = make_windows(schema, header, group_rows_by_user(header, rows_tr, schema),
                           10, 5, "pretrain")
    # generator-derived baselines over the training windows
    cat = np.concatenate([s.cat_tokens for s in samples])
    majority = float(np.mean([
        np.unique(cat[:, c], return_counts=True)[1].max() / cat.shape[0]
        for c in range(cat.shape[1])
    ]))
    ckpt, _ = pretrain(samples, schema, ModelConfig(),
                       TrainConfig(epochs=5, batch_size=32, seed=0), MaskConfig(seed=0))
    # post-training masked-reconstruction evaluation with fresh plans
    params = ckpt.tensors(trainable=set())
    stats = {"cat_total": 0, "cat_correct": 0, "cont_total": 0, "cont_sse": 0.0}
    target_sq = 0.0
    for start in range(0, len(samples), 64):
        chunk = samples[start : start + 64]
        batch = masked_batch(chunk, schema, MaskConfig(seed=0), epoch=5,
                             sample_indices=list(range(start, start + len(chunk))))
        preds, _ = forward_mdm(batch, params, ckpt.model_config, schema)
        bs = mdm_batch_stats(preds, batch, schema)
        for k in stats:
            stats[k] += bs[k]
        target_sq += float((batch.cont_targets[batch.cont_mask].astype(np.float64) ** 2).sum())
    acc = stats["cat_correct"] / stats["cat_total"]
    mse = stats["cont_sse"] / stats["cont_total"]
    variance_baseline = target_sq / stats["cont_total"]
    elapsed = time.time() - t0
    ok = acc >= majority + 0.10 and mse < variance_baseline and elapsed < 300
    report("pretraining-signal", ok,
           f"masked-cat acc {acc:.3f} >= majority {majority:.3f} + 0.10, "
           f"masked-cont mse {mse:.3f} < baseline {variance_baseline:.3f}, "
           f"runtime {elapsed:.0f}s < 300s")


def test_end_to_end_classification(bench, bench_runs):
    stages = bench_runs["stage_seconds"]
    pipeline_seconds = sum(stages.values())
    f1_primary = bench_runs["f1_finetuned"][0]
    floor = 0.9 * bench["bound"]
    mean_ft = float(np.mean(bench_runs["f1_finetuned"]))
    mean_sc = float(np.mean(bench_runs["f1_scratch"]))
    ok = f1_primary >= floor and pipeline_seconds < 900 and mean_ft >= mean_sc - 0.02
    report("end-to-end-classification", ok,
           f"F1 {f1_primary:.3f} >= 0.9 x bound {bench['bound']:.3f} = {floor:.3f}; "
           f"pipeline {pipeline_seconds:.0f}s < 900s; finetuned {mean_ft:.3f} vs "
           f"scratch {mean_sc:.3f} - 0.02 over seeds {bench_runs['f1_finetuned']}")


def test_ablation_direction(bench_runs):
    mean_fr = float(np.mean(bench_runs["f1_finetuned"]))
    mean_f = float(np.mean(bench_runs["f1_field_only"]))
    ok = mean_fr >= mean_f - 0.01
    report("ablation-direction", ok,
           f"field+row {mean_fr:.3f} >= field-only {mean_f:.3f} - 0.01 "
           f"({bench_runs['f1_finetuned']} vs {bench_runs['f1_field_only']})")


def test_determinism_and_persistence(tiny_env, tmp_path):
    schema = tiny_env["schema"]
    mcfg = ModelConfig(d_model=16, n_heads=2, n_blocks=1, ffn_mult=2)
    tcfg = TrainConfig(epochs=2, batch_size=8, seed=4)
    ckpt1, rec1 = pretrain(tiny_env["pretrain_samples"], schema, mcfg, tcfg, MaskConfig(seed=4))
    ckpt2, rec2 = pretrain(tiny_env["pretrain_samples"], schema, mcfg, tcfg, MaskConfig(seed=4))
    traces_equal = rec1 == rec2
    tuned, _ = finetune(ckpt1, tiny_env["downstream_samples"], schema,
                        TrainConfig(epochs=1, batch_size=8, seed=4, mode="finetune"))
    path = tmp_path / "ckpt.bin"
    save_checkpoint(tuned, path)
    loaded = load_checkpoint(path)
    batch = stack_batch(tiny_env["downstream_samples"][:4])
    from tabaconv.model import forward_classify

    out_before = forward_classify(batch, tuned.tensors(set()), mcfg, schema).data
    out_after = forward_classify(batch, loaded.tensors(set()), mcfg, schema).data
    roundtrip_bitwise = out_before.tobytes() == out_after.tobytes()
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    corrupt_path = tmp_path / "corrupt.bin"
    corrupt_path.write_bytes(bytes(blob))
    try:
        load_checkpoint(corrupt_path)
        corrupt_rejected = False
    except IntegrityError:
        corrupt_rejected = True
    ok = traces_equal and roundtrip_bitwise and corrupt_rejected
    report("determinism-and-persistence", ok,
           f"traces equal: {traces_equal}, forward bitwise after roundtrip: {roundtrip_bitwise}, "
           f"corrupt rejected: {corrupt_rejected}")


def test_calendar_correctness():
    rng = np.random.default_rng(2024)
    samples = [int(t) for t in rng.integers(0, 2**31, size=1000)]
    samples += [parse_iso8601(s) for s in
                ("2020-12-31T23:59:59Z", "2021-01-01T00:00:00Z", "2015-12-31T12:00:00Z",
                 "1981-12-31T00:00:00Z", "1970-01-01T00:00:00Z", "2038-01-19T03:14:07Z")]
    mismatches = 0
    week53 = 0
    for ts in samples:
        got = decompose_timestamp(ts)
        ref = dt.datetime.fromtimestamp(ts, tz=dt.timezone.utc)
        expected = (ref.year, ref.month, ref.day, ref.weekday(), ref.isocalendar()[1],
                    ref.hour, ref.minute, ref.second)
        mismatches += got != expected
        week53 += got[4] == 53
    report("calendar-correctness", mismatches == 0 and week53 > 0,
           f"{len(samples)} timestamps 1970-2038, {mismatches} mismatches, "
           f"{week53} week-53 cases exercised")
