"""Shared fixtures: a small synthetic dataset and its windowed views."""

import pytest

from tabaconv import synth
from tabaconv.schema import (
    group_rows_by_user,
    infer_schema,
    make_windows,
    read_csv,
    split_users,
    users_in_order,
)


@pytest.fixture(scope="session")
def tiny_env(tmp_path_factory):
    """6 users x 40 rows; schema on the training split; both window modes."""
    out = tmp_path_factory.mktemp("tiny_data")
    cfg = synth.SynthConfig(n_users=6, rows_per_user=40, fraud_rate=0.05,
                            label_noise=0.05, seed=11, n_merchants=8,
                            n_categories=5, n_cities=5)
    csv_path, manifest_path = synth.generate(cfg, out)
    roles = synth.default_roles()
    header, rows = read_csv(csv_path)
    users = users_in_order(header, rows, "user_id")
    train_users = set(split_users(users)[0])
    schema = infer_schema(csv_path, roles, include_users=train_users)
    rows_tr = [r for r in rows if r[0] in train_users]
    grouped = group_rows_by_user(header, rows_tr, schema)
    pretrain_samples = make_windows(schema, header, grouped, window=8, stride=4, mode="pretrain")
    downstream_samples = make_windows(schema, header, grouped, window=8, stride=8, mode="downstream")
    return {
        "dir": out,
        "csv": csv_path,
        "manifest": manifest_path,
        "roles": roles,
        "schema": schema,
        "header": header,
        "rows": rows,
        "grouped": grouped,
        "pretrain_samples": pretrain_samples,
        "downstream_samples": downstream_samples,
    }
