import numpy as np
import pytest

from metassign import (ConfigError, load_run_config, read_dataset,
                       write_dataset)
from metassign.cli import cli_main

from conftest import NET_TEXT, TRIPS_TEXT, grid_network, random_demand

EXAMPLE_INI = """
# annotated example
[generation]
n_tasks = 6           # closure tasks
n_ods = 5
closure_low = 0.05
closure_high = 0.30
factor_low = 0.15
factor_high = 0.70
seed = 3
n_test_tasks = 1
n_test_ods = 2

[solver]
method = bcfw
gap_tolerance = 1e-4

[model]
hidden = 16
layers = 2

[meta]
alpha = 0.02
beta = 0.055
k_support = 1
m_query = 2
inner_steps = 2
task_batch = 2
meta_iterations = 5
"""


class TestRunConfig:
    def test_defaults_match_reference_tables(self):
        cfg = load_run_config()
        assert cfg.model.hidden == 192
        assert cfg.model.layers == 6
        assert cfg.model.dropout_p == 0.01
        assert cfg.meta.alpha == 0.02
        assert cfg.meta.beta == 0.055
        assert cfg.meta.k_support == 4
        assert cfg.meta.m_query == 25
        assert cfg.meta.inner_steps == 5
        assert cfg.meta.task_batch == 7
        assert cfg.meta.meta_iterations == 1500
        assert cfg.generation.n_tasks == 336
        assert cfg.generation.n_ods == 74
        assert cfg.generation.closure_fraction_range == (0.05, 0.30)
        assert cfg.generation.n_test_tasks == 3
        assert cfg.generation.n_test_ods == 25

    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text(EXAMPLE_INI)
        cfg = load_run_config(path, overrides={"model.hidden": "8"})
        assert cfg.model.hidden == 8
        assert cfg.generation.n_tasks == 6
        assert cfg.meta.meta_iterations == 5

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[meta]\nlearning_rate = 1\n")
        with pytest.raises(ConfigError, match="unknown key"):
            load_run_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[training]\nx = 1\n")
        with pytest.raises(ConfigError, match="unknown config section"):
            load_run_config(path)

    def test_inconsistent_support_query_rejected(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[generation]\nn_ods = 10\nn_test_ods = 5\n"
                        "[meta]\nk_support = 4\nm_query = 25\n")
        with pytest.raises(ConfigError, match="exceeds"):
            load_run_config(path)

    def test_bad_value_type(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[model]\nhidden = lots\n")
        with pytest.raises(ConfigError, match="expected int"):
            load_run_config(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "net.tntp").write_text(NET_TEXT)
    (root / "trips.tntp").write_text(TRIPS_TEXT)
    (root / "run.ini").write_text(EXAMPLE_INI)
    rng = np.random.default_rng(0)
    net = grid_network(rng)
    base = random_demand(net, seed=1, density=0.4, lo=5, hi=40)
    import metassign.network as mn

    def write_tntp(path, network, od):
        lines = [f"<NUMBER OF ZONES> {network.n_zones}",
                 f"<NUMBER OF NODES> {network.n_nodes}",
                 "<FIRST THRU NODE> 1",
                 f"<NUMBER OF LINKS> {network.n_edges}",
                 "<END OF METADATA>", "", "~ cols ;"]
        for e in range(network.n_edges):
            lines.append(
                f"{network.from_node[e] + 1}\t{network.to_node[e] + 1}\t"
                f"{network.capacity[e]}\t{network.length[e]}\t"
                f"{network.free_flow_time[e]}\t{network.bpr_b[e]}\t"
                f"{network.bpr_power[e]}\t0\t0\t1\t;")
        path.write_text("\n".join(lines) + "\n")
        trips = [f"<NUMBER OF ZONES> {od.n_zones}",
                 f"<TOTAL OD FLOW> {od.total_trips}",
                 "<END OF METADATA>", ""]
        for o in range(od.n_zones):
            trips.append(f"Origin {o + 1}")
            row = " ".join(f"{d + 1} : {od.demand[o, d]};"
                           for d in np.nonzero(od.demand[o])[0])
            if row:
                trips.append(row)
        return trips

    trips_lines = write_tntp(root / "grid_net.tntp", net, base)
    (root / "grid_trips.tntp").write_text("\n".join(trips_lines) + "\n")
    return root


class TestCliAssign:
    def test_assign_to_csv(self, workdir, capsys):
        out = workdir / "flows.csv"
        rc = cli_main(["assign", "--net", str(workdir / "grid_net.tntp"),
                       "--trips", str(workdir / "grid_trips.tntp"),
                       "--method", "bcfw", "--gap", "1e-4",
                       "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "edge_id,from,to,flow,cost,gap_at_exit"
        assert len(lines) == 25  # 24 edges + header

    def test_assign_with_mask(self, workdir):
        mask = workdir / "mask.txt"
        mask.write_text("0\n3\n")
        out = workdir / "masked.csv"
        rc = cli_main(["assign", "--net", str(workdir / "grid_net.tntp"),
                       "--trips", str(workdir / "grid_trips.tntp"),
                       "--mask", str(mask), "--out", str(out)])
        assert rc == 0
        rows = [line.split(",") for line in
                out.read_text().strip().splitlines()[1:]]
        flows = {int(r[0]): float(r[3]) for r in rows}
        assert flows[0] == 0.0 and flows[3] == 0.0

    def test_missing_file_is_single_line_error(self, workdir, capsys):
        rc = cli_main(["assign", "--net", "nope.tntp",
                       "--trips", str(workdir / "grid_trips.tntp")])
        assert rc == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("error: ") and "\n" not in err


class TestCliPipeline:
    def test_generate_train_test_report(self, workdir, capsys):
        data = workdir / "corpus.bin"
        rc = cli_main(["generate", "--net", str(workdir / "grid_net.tntp"),
                       "--trips", str(workdir / "grid_trips.tntp"),
                       "--config", str(workdir / "run.ini"),
                       "--out", str(data)])
        assert rc == 0
        ds = read_dataset(data)
        assert len(ds.samples) == 30  # 6 tasks x 5 ODs

        ckpt = workdir / "weights.bin"
        hist = workdir / "history.csv"
        rc = cli_main(["meta-train", "--data", str(data),
                       "--config", str(workdir / "run.ini"),
                       "--out", str(ckpt), "--history", str(hist)])
        assert rc == 0
        assert hist.read_text().startswith("iteration,mean_query_loss,wall_time_s")
        assert len(hist.read_text().strip().splitlines()) == 6

        outdir = workdir / "report"
        rc = cli_main(["meta-test", "--data", str(data),
                       "--checkpoint", str(ckpt),
                       "--config", str(workdir / "run.ini"),
                       "--out-dir", str(outdir)])
        assert rc == 0
        assert (outdir / "summary.csv").exists()

        rc = cli_main(["report", "--in-dir", str(outdir),
                       "--out-dir", str(workdir / "rerender")])
        assert rc == 0
        assert (workdir / "rerender" / "summary_recomputed.csv").exists()

    def test_meta_test_requires_checkpoint(self, workdir):
        rc = cli_main(["meta-test", "--data", "x", "--out-dir", "y"])
        assert rc == 2

    def test_unknown_subcommand_usage_exit(self):
        assert cli_main(["frobnicate"]) == 2

    def test_corrupt_dataset_reported(self, workdir, capsys):
        bad = workdir / "bad.bin"
        bad.write_bytes(b"JUNKJUNKJUNK")
        rc = cli_main(["meta-train", "--data", str(bad),
                       "--out", str(workdir / "w.bin")])
        assert rc == 1
        assert capsys.readouterr().err.startswith("error: ")
