import csv
import io
import json

import numpy as np
import pytest

from ylab.cachefile import read_cache
from ylab.cli import CommandResult, main, render
from ylab.config import DEFAULT_SEED, RunConfig, build_parser, parse_config
from ylab.exceptions import UsageError

HYBRID_ROW = "3:1,4096,65536,32,1,1476395008,8589934592,82.8125"


def csv_rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def pairs_file(tmp_path):
    path = tmp_path / "pairs.jsonl"
    records = [
        {"prompt": [1, 2, 3], "chosen": [4, 5], "rejected": [6]},
        {"prompt": [], "chosen": [7, 8, 9], "rejected": [7, 1]},
        {"prompt": [2], "chosen": [3], "rejected": [30, 31]},
    ]
    path.write_text("".join(json.dumps(record) + "\n" for record in records))
    return path


class TestParseConfig:
    def test_seed_flag(self):
        config = parse_config(["route-balance", "--seed", "7"], env={})
        assert config.seed == 7
        assert config.subcommand == "route-balance"

    def test_defaults(self):
        config = parse_config(["kv-memory"], env={})
        assert config.seed == DEFAULT_SEED
        assert config.get("attention.window") == (4096,)
        assert config.get("attention.pattern") == ("3:1", "full")
        assert config.get("attention.layers") == 32
        assert config.format == "csv"

    def test_aliases(self):
        config = parse_config(
            ["kv-memory", "--window", "256,4096", "--pattern", "3:1", "--no-share"], env={}
        )
        assert config.get("attention.window") == (256, 4096)
        assert config.get("attention.pattern") == ("3:1",)
        assert config.get("attention.share") == "off"

    def test_flag_overrides_file(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("# router run\nseed = 3\nrouter.steps = 10\nrouter.lr = 5.0  # slow\n")
        config = parse_config(
            ["route-balance", "--config", str(path), "--router.steps", "20"], env={}
        )
        assert config.get("router.steps") == 20
        assert config.get("router.lr") == 5.0
        assert config.seed == 3

    def test_seed_precedence(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("seed = 3\n")
        env = {"YLAB_SEED": "9"}
        assert parse_config(["pack"], env=env).seed == 9
        assert parse_config(["pack", "--config", str(path)], env=env).seed == 3
        assert parse_config(["pack", "--config", str(path), "--seed", "1"], env=env).seed == 1

    def test_bad_env_seed(self):
        with pytest.raises(UsageError, match="YLAB_SEED"):
            parse_config(["pack"], env={"YLAB_SEED": "-4"})

    def test_unknown_flag_lists_valid_keys(self):
        with pytest.raises(UsageError) as info:
            parse_config(["route-balance", "--router.bogus", "1"], env={})
        assert "router.bogus" in str(info.value)
        assert "router.alpha_st" in str(info.value)

    @pytest.mark.parametrize("flag", ["--router.alpha_p", "--router.st", "--se", "--out"])
    def test_key_prefix_is_not_accepted(self, flag):
        with pytest.raises(UsageError, match="Valid keys"):
            parse_config(["route-balance", flag, "0", "--router.steps", "2"], env={})

    def test_unknown_file_key_names_line(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("router.steps = 5\nattention.window = 3\n")
        with pytest.raises(UsageError, match=":2:"):
            parse_config(["route-balance", "--config", str(path)], env={})

    def test_bad_values(self):
        with pytest.raises(UsageError):
            parse_config(["route-balance", "--seed", "-1"], env={})
        with pytest.raises(UsageError):
            parse_config(["route-balance", "--router.steps", "many"], env={})
        with pytest.raises(UsageError):
            parse_config(["pack", "--pack.policy", "random"], env={})
        with pytest.raises(UsageError):
            parse_config(["pack", "--jobs", "0"], env={})

    def test_missing_subcommand(self):
        with pytest.raises(UsageError):
            parse_config([], env={})

    def test_get_unknown_key(self):
        with pytest.raises(UsageError):
            RunConfig("pack").get("router.steps")

    def test_help_lists_keys(self, capsys):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["kv-memory", "--help"])
        text = capsys.readouterr().out
        assert "--attention.window" in text
        assert "(default: 4096)" in text


class TestRender:
    def test_csv_cells(self):
        result = CommandResult(["a", "b", "c"], [{"a": True, "b": 0.1, "c": np.int64(3)}])
        assert render(result, "csv") == "a,b,c\n1,0.1,3\n"

    def test_json(self):
        result = CommandResult(["b", "a"], [{"a": np.float64(0.5), "b": "x"}])
        assert json.loads(render(result, "json")) == [{"a": 0.5, "b": "x"}]


class TestMain:
    def test_unknown_key_exits_with_usage(self, capsys):
        assert main(["route-balance", "--bogus", "1"]) == 2
        assert "Valid keys" in capsys.readouterr().err

    def test_kv_memory_hybrid_row(self, capsys):
        code = main(
            ["kv-memory", "--window", "4096", "--context", "65536", "--pattern", "3:1", "--share"]
        )
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == (
            "pattern,window,context_len,n_layers,share,total_bytes,baseline_bytes,reduction_pct"
        )
        assert lines[1:] == [HYBRID_ROW]

    def test_kv_memory_json(self, capsys):
        assert main(["kv-memory", "--pattern", "full", "--share", "--format", "json"]) == 0
        (row,) = json.loads(capsys.readouterr().out)
        assert row["reduction_pct"] == 50.0

    def test_output_file_is_deterministic(self, tmp_path):
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for path in paths:
            argv = ["decode-check", "--decode.seeds", "1", "--decode.tokens", "8"]
            assert main(argv + ["--seed", "5", "--output", str(path)]) == 0
        assert paths[0].read_bytes() == paths[1].read_bytes()
        rows = csv_rows(paths[0].read_text())
        assert len(rows) == 4
        assert all(row["passed"] == "1" for row in rows)

    def test_route_balance_rows(self, capsys):
        argv = ["route-balance", "--router.steps", "20", "--router.every", "5"]
        assert main(argv + ["--router.tokens_per_step", "64"]) == 0
        rows = csv_rows(capsys.readouterr().out)
        assert [int(row["step"]) for row in rows] == [0, 5, 10, 15, 19]

    def test_dispatch_sim_variants(self, capsys):
        argv = ["dispatch-sim", "--router.steps", "5", "--router.tokens_per_step", "64"]
        assert main(argv + ["--jobs", "2"]) == 0
        rows = csv_rows(capsys.readouterr().out)
        assert [(row["variant"], row["scope"]) for row in rows[:2]] == [
            ("0", "group"), ("0", "partition")
        ]
        assert len(rows) == 8

    def test_pack(self, tmp_path, capsys):
        tokens = tmp_path / "tokens.txt"
        tokens.write_text("1 2 3\n4 5\n")
        assert main(["pack", "--pack.input", str(tokens), "--pack.capacity", "8"]) == 0
        captured = capsys.readouterr()
        assert captured.out == (
            "sequence,sample_id,start,length,weight\n0,0,0,3,0.25\n0,1,3,2,0.5\n"
        )
        assert "62.50%" in captured.err

    def test_pack_errors(self, tmp_path):
        assert main(["pack"]) == 2
        tokens = tmp_path / "tokens.txt"
        tokens.write_text("1 2 3 4 5\n")
        assert main(["pack", "--pack.input", str(tokens), "--pack.capacity", "2"]) == 2
        assert main(["pack", "--pack.input", str(tmp_path / "missing.txt")]) == 2

    def test_pack_single_token_line(self, tmp_path, capsys):
        tokens = tmp_path / "tokens.txt"
        tokens.write_text("5\n1 2 3\n")
        assert main(["pack", "--pack.input", str(tokens)]) == 2
        assert "Sample 0 has 1 tokens" in capsys.readouterr().err

    def test_dpo_step(self, pairs_file, capsys):
        assert main(["dpo-step", "--dpo.input", str(pairs_file), "--dpo.steps", "3"]) == 0
        rows = csv_rows(capsys.readouterr().out)
        assert [row["step"] for row in rows] == ["0", "1", "2"]
        assert float(rows[0]["loss"]) == pytest.approx(np.log(2.0))
        assert float(rows[-1]["loss"]) < float(rows[0]["loss"])

    def test_dpo_step_bad_token(self, tmp_path, capsys):
        path = tmp_path / "pairs.jsonl"
        path.write_text('{"prompt": ["a"], "chosen": [1], "rejected": [2]}\n')
        assert main(["dpo-step", "--dpo.input", str(path)]) == 2
        assert "Line 1" in capsys.readouterr().err

    def test_dpo_cache(self, pairs_file, tmp_path):
        assert main(["dpo-cache", "--dpo.input", str(pairs_file)]) == 2
        output = tmp_path / "snap.yllc"
        argv = ["dpo-cache", "--dpo.input", str(pairs_file), "--dpo.snapshot", "snap"]
        assert main(argv + ["--output", str(output)]) == 0
        cache = read_cache(output)
        assert len(cache) == 6
        assert output.read_bytes()[:4] == b"YLLC"

    def test_gradcheck(self, capsys):
        assert main(["gradcheck", "--gradcheck.instances", "2"]) == 0
        rows = csv_rows(capsys.readouterr().out)
        assert [row["check"] for row in rows] == ["aux_loss", "dpo", "bt"]
        assert all(row["passed"] == "1" for row in rows)

    def test_failed_check_exits_one(self, capsys):
        argv = ["gradcheck", "--gradcheck.instances", "1", "--gradcheck.tolerance", "0"]
        assert main(argv) == 1
