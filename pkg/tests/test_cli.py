"""CLI tests: config validation and exit codes, CSV shape, and run-to-run
byte determinism for every subcommand."""

import json

from xcache.cli import main


def write_json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return str(path)


def read_csv(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


SMALL_MODEL = {
    "hidden_dim": 32, "n_layers": 2, "n_heads": 4, "kv_group": 2,
    "vocab_size": 61, "mlp_scale": 0.05, "seed": 5,
}


class TestEval:
    def test_fp_only_row(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {
            "schema": 1, "model": SMALL_MODEL, "variants": ["fp16"],
            "bits": [16], "sequence_length": 24, "seed": 3,
        })
        out = tmp_path / "r.csv"
        assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
        rows = read_csv(out)
        assert len(rows) == 1
        assert rows[0]["variant"] == "fp16"
        assert float(rows[0]["max_logit_err"]) == 0.0

    def test_all_variants_identity(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {
            "schema": 1, "model": SMALL_MODEL,
            "variants": ["fp16", "kvq", "xq-mha", "xq-gqa", "xq-cl-mha",
                          "xq-cl-gqa"],
            "bits": [16], "sequence_length": 24, "seed": 3,
        })
        out = tmp_path / "r.csv"
        assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
        for row in read_csv(out):
            assert float(row["max_logit_err"]) <= 1e-8

    def test_decode_match_column(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {
            "schema": 1, "model": SMALL_MODEL, "variants": ["kvq"],
            "bits": [16], "sequence_length": 16, "decode_steps": 4, "seed": 3,
        })
        out = tmp_path / "r.csv"
        assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
        assert float(read_csv(out)[0]["decode_match"]) == 1.0

    def test_rerun_byte_identical(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {
            "schema": 1, "model": SMALL_MODEL,
            "variants": ["xq-mha", "xq-cl-mha"],
            "bits": [4, 2], "sequence_length": 24, "seed": 9,
        })
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(["eval", "--config", cfg, "--out", str(a)]) == 0
        assert main(["eval", "--config", cfg, "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_threaded_rows_keep_config_order(self, tmp_path, monkeypatch):
        monkeypatch.setenv("XCACHE_THREADS", "4")
        cfg = write_json(tmp_path / "c.json", {
            "schema": 1, "model": SMALL_MODEL,
            "variants": ["fp16", "kvq", "xq-mha"],
            "bits": [16, 4], "sequence_length": 16, "seed": 1,
        })
        out = tmp_path / "r.csv"
        assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
        rows = read_csv(out)
        assert [(r["variant"], r["bits"]) for r in rows] == [
            ("fp16", "16"), ("fp16", "4"), ("kvq", "16"), ("kvq", "4"),
            ("xq-mha", "16"), ("xq-mha", "4"),
        ]

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"schema": 1, "modle": {}})
        assert main(["eval", "--config", cfg, "--out", "x.csv"]) == 2
        assert "modle" in capsys.readouterr().err

    def test_bad_schema_exit_2(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"schema": 0})
        assert main(["eval", "--config", cfg, "--out", "x.csv"]) == 2

    def test_unknown_variant_exit_2(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {
            "schema": 1, "model": SMALL_MODEL, "variants": ["kv-int8"],
            "bits": [4],
        })
        assert main(["eval", "--config", cfg, "--out", "x.csv"]) == 2

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["eval", "--config", str(tmp_path / "no.json"),
                     "--out", "x.csv"]) == 2

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {
            "schema": 1, "model": SMALL_MODEL, "variants": ["xq-mha"],
            "bits": [2], "sequence_length": 24, "seed": 1,
        })
        a, b, c = (tmp_path / n for n in ("a.csv", "b.csv", "c.csv"))
        assert main(["eval", "--config", cfg, "--out", str(a)]) == 0
        assert main(["eval", "--config", cfg, "--out", str(b),
                     "--seed", "2"]) == 0
        assert main(["eval", "--config", cfg, "--out", str(c),
                     "--seed", "1"]) == 0
        assert a.read_bytes() != b.read_bytes()  # different token stream
        assert a.read_bytes() == c.read_bytes()  # explicit seed matches config


class TestRoofline:
    CONFIG = {
        "schema": 1,
        "hardware": {"name": "H100", "peak_flops": 756e12, "mem_bw": 2e12},
        "sequence_length": 1000,
        "variants": [
            {"variant": "xq-mha", "hidden_dim": 4096, "kv_group": 1,
             "bits": 2, "n_layers": 32, "weights": "mha"},
            {"variant": "xq-gqa", "hidden_dim": 4096, "kv_group": 4,
             "bits": 2, "n_layers": 32, "weights": "gqa"},
            {"variant": "fp16", "hidden_dim": 4096, "kv_group": 1,
             "bits": 16, "n_layers": 32, "weights": "mha"},
        ],
    }

    def test_published_breakevens(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", self.CONFIG)
        out = tmp_path / "r.csv"
        assert main(["roofline", "--config", cfg, "--out", str(out)]) == 0
        rows = read_csv(out)
        mha = float(rows[0]["breakeven_length"])
        gqa = float(rows[1]["breakeven_length"])
        assert abs(mha - 2281) <= 0.01 * 2281
        assert abs(gqa - 40627) <= 0.01 * 40627
        assert rows[2]["breakeven_length"] == "unbounded"
        assert float(rows[2]["normalized_kv_size"]) == 1.0

    def test_text_variant_flag_changes_gqa(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", self.CONFIG)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(["roofline", "--config", cfg, "--out", str(a)]) == 0
        assert main(["roofline", "--config", cfg, "--out", str(b),
                     "--eq4-text-variant"]) == 0
        ra, rb = read_csv(a), read_csv(b)
        assert ra[0]["breakeven_length"] == rb[0]["breakeven_length"]
        assert ra[1]["breakeven_length"] != rb[1]["breakeven_length"]

    def test_rerun_byte_identical(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", self.CONFIG)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["roofline", "--config", cfg, "--out", str(a)])
        main(["roofline", "--config", cfg, "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_lf_line_endings(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", self.CONFIG)
        out = tmp_path / "r.csv"
        main(["roofline", "--config", cfg, "--out", str(out)])
        blob = out.read_bytes()
        assert b"\r" not in blob
        assert blob.endswith(b"\n")

    def test_bad_weight_selector(self, tmp_path):
        bad = json.loads(json.dumps(self.CONFIG))
        bad["variants"][0]["weights"] = "gguf"
        cfg = write_json(tmp_path / "c.json", bad)
        assert main(["roofline", "--config", cfg, "--out", "x.csv"]) == 2


class TestOutliers:
    def test_dominant_instances(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {
            "schema": 1, "mode": "dominant", "k": [1, 16], "instances": 10,
            "seed": 0,
        })
        out = tmp_path / "r.csv"
        assert main(["outliers", "--config", cfg, "--out", str(out)]) == 0
        rows = read_csv(out)
        acc = {r["k"]: float(r["value"]) for r in rows if r["scope"] == "all"}
        assert acc["1"] == 1.0
        assert acc["16"] == 1.0

    def test_failure_instances(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {
            "schema": 1, "mode": "failure", "k": [1], "instances": 8,
            "seed": 0,
        })
        out = tmp_path / "r.csv"
        assert main(["outliers", "--config", cfg, "--out", str(out)]) == 0
        rows = read_csv(out)
        acc = [float(r["value"]) for r in rows if r["scope"] == "all"]
        assert acc[0] < 1.0

    def test_model_mode_runs(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {
            "schema": 1, "mode": "model", "k": [1, 8],
            "model": SMALL_MODEL, "sequence_length": 24, "seed": 4,
        })
        out = tmp_path / "r.csv"
        assert main(["outliers", "--config", cfg, "--out", str(out)]) == 0
        rows = read_csv(out)
        per_layer = [r for r in rows if r["scope"].startswith("layer")]
        assert len(per_layer) == SMALL_MODEL["n_layers"] * 2

    def test_k_beyond_width_rejected(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {
            "schema": 1, "mode": "dominant", "k": [64], "instances": 2,
            "latent_width": 16, "seed": 0,
        })
        assert main(["outliers", "--config", cfg, "--out", "x.csv"]) == 2


class TestWeights:
    def test_save_load_inspect_round_trip(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"schema": 1, "model": SMALL_MODEL})
        w1 = tmp_path / "a.xqw"
        w2 = tmp_path / "b.xqw"
        assert main(["weights", "save", "--config", cfg, "--out", str(w1)]) == 0
        assert main(["weights", "save", "--config", cfg, "--out", str(w2)]) == 0
        assert w1.read_bytes() == w2.read_bytes()
        assert main(["weights", "load", "--path", str(w1)]) == 0
        assert main(["weights", "inspect", "--path", str(w1)]) == 0
        out = capsys.readouterr().out
        assert "hidden_dim=32" in out
        assert "n_layers=2" in out
        assert "kv_group=2" in out

    def test_truncated_file_exit_2(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "c.json", {"schema": 1, "model": SMALL_MODEL})
        w = tmp_path / "m.xqw"
        main(["weights", "save", "--config", cfg, "--out", str(w)])
        blob = w.read_bytes()
        w.write_bytes(blob[: len(blob) // 2])
        assert main(["weights", "inspect", "--path", str(w)]) == 2
        assert "offset" in capsys.readouterr().err

    def test_bad_magic_exit_2(self, tmp_path, capsys):
        w = tmp_path / "m.xqw"
        w.write_bytes(b"ELF\x7f" + b"\x00" * 100)
        assert main(["weights", "load", "--path", str(w)]) == 2
        assert "XQW1" in capsys.readouterr().err
