import json

import numpy as np
import pytest

from corrdefault import io as cdio
from corrdefault.cli import main
from corrdefault.ctmc import random_generator
from corrdefault.model import Graph, ModelParams, extract_interactions, full_distribution

from conftest import random_model


def write_json(path, payload):
    with open(path, "w") as handle:
        json.dump(payload, handle)


@pytest.fixture
def k2_model_file(tmp_path):
    params = ModelParams(Graph.complete(2), [0.0, 0.0], [float(np.log(2.0))])
    path = tmp_path / "model.json"
    cdio.write_model_json(path, params)
    return path


class TestFileFormats:
    def test_model_round_trip(self, tmp_path, rng):
        params = random_model(rng, 4)
        path = tmp_path / "model.json"
        cdio.write_model_json(path, params)
        back = cdio.read_model_json(path)
        assert back.graph == params.graph
        np.testing.assert_allclose(back.alpha, params.alpha)
        np.testing.assert_allclose(back.beta, params.beta)

    def test_bipartite_model_round_trip(self, tmp_path):
        graph = Graph.complete_bipartite(2, 2)
        params = ModelParams(graph, [0.1, -0.2, 0.3, 0.4], [0.5, 0.1, -0.2, 0.0])
        path = tmp_path / "model.json"
        cdio.write_model_json(path, params)
        assert cdio.read_model_json(path).graph.bipartition == graph.bipartition

    def test_generator_round_trip(self, tmp_path):
        gen = random_generator(3, seed=2)
        path = tmp_path / "gen.json"
        cdio.write_generator_json(path, gen)
        back = cdio.read_generator_json(path)
        np.testing.assert_allclose(back.rates, gen.rates)

    def test_distribution_csv_round_trip(self, tmp_path, rng):
        dist = full_distribution(random_model(rng, 3))
        path = tmp_path / "dist.csv"
        cdio.write_distribution_csv(path, dist, config={"x": 1})
        back = cdio.read_distribution_csv(path)
        np.testing.assert_allclose(back.probs, dist.probs, rtol=0.0, atol=0.0)

    def test_header_block(self, tmp_path, rng):
        dist = full_distribution(random_model(rng, 2))
        path = tmp_path / "dist.csv"
        config = {"seed": 3}
        cdio.write_distribution_csv(path, dist, config=config)
        text = path.read_text().splitlines()
        assert text[0] == f"# tool_version={cdio.TOOL_VERSION}"
        assert text[1] == f"# config_hash={cdio.config_hash(config)}"

    def test_csv_floats_round_trip_exactly(self, tmp_path, rng):
        dist = full_distribution(random_model(rng, 4))
        path = tmp_path / "dist.csv"
        cdio.write_distribution_csv(path, dist)
        back = cdio.read_distribution_csv(path)
        assert np.array_equal(back.probs, dist.probs)


class TestCmdModel:
    def test_distribution_output(self, tmp_path, k2_model_file):
        out = tmp_path / "out"
        config = {"io": {"model_file": str(k2_model_file), "out_dir": str(out)}}
        cfg_path = tmp_path / "run.json"
        write_json(cfg_path, config)
        assert main(["model", "--config", str(cfg_path)]) == 0
        dist = cdio.read_distribution_csv(out / "distribution.csv")
        assert dist.probs[3] == pytest.approx(0.4, abs=1e-14)
        assert (out / "ising.json").exists()
        assert (out / "interactions.csv").exists()

    def test_pipeline_round_trip(self, tmp_path, rng):
        params = random_model(rng, 4)
        model_path = tmp_path / "model.json"
        cdio.write_model_json(model_path, params)
        out = tmp_path / "out"
        cfg_path = tmp_path / "run.json"
        write_json(cfg_path, {"io": {"model_file": str(model_path), "out_dir": str(out)}})
        assert main(["model", "--config", str(cfg_path)]) == 0
        dist = cdio.read_distribution_csv(out / "distribution.csv")
        coeffs = extract_interactions(dist)
        for u in range(4):
            assert coeffs.single(u) == pytest.approx(params.alpha[u], abs=1e-10)
        for (u, v), b in zip(params.graph.edges, params.beta):
            assert coeffs.pair(u, v) == pytest.approx(b, abs=1e-10)

    def test_fit_with_product_targets(self, tmp_path, k2_model_file):
        targets = {
            "vertex_targets": [0.4, 0.6],
            "pair_targets": [{"edge": [0, 1], "value": 0.24}],
        }
        targets_path = tmp_path / "targets.json"
        write_json(targets_path, targets)
        out = tmp_path / "out"
        cfg_path = tmp_path / "run.json"
        write_json(
            cfg_path,
            {
                "io": {
                    "model_file": str(k2_model_file),
                    "targets_file": str(targets_path),
                    "out_dir": str(out),
                }
            },
        )
        assert main(["model", "--config", str(cfg_path), "--fit"]) == 0
        fitted = cdio.read_model_json(out / "fitted_model.json")
        np.testing.assert_allclose(fitted.beta, 0.0, atol=1e-6)

    def test_infeasible_fit_exits_3(self, tmp_path, k2_model_file):
        targets_path = tmp_path / "targets.json"
        write_json(
            targets_path,
            {"vertex_targets": [0.3, 0.5], "pair_targets": [{"edge": [0, 1], "value": 0.4}]},
        )
        cfg_path = tmp_path / "run.json"
        write_json(
            cfg_path,
            {
                "io": {
                    "model_file": str(k2_model_file),
                    "targets_file": str(targets_path),
                    "out_dir": str(tmp_path / "out"),
                }
            },
        )
        assert main(["model", "--config", str(cfg_path), "--fit"]) == 3

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["model", "--config", str(tmp_path / "nope.json")]) == 2

    def test_missing_model_file_key_exits_2(self, tmp_path):
        cfg_path = tmp_path / "run.json"
        write_json(cfg_path, {"io": {"out_dir": str(tmp_path / "out")}})
        assert main(["model", "--config", str(cfg_path)]) == 2


class TestCmdDynamics:
    def test_independent_reports(self, tmp_path):
        alpha_path = tmp_path / "alpha.json"
        write_json(alpha_path, {"alpha": [0.0, 0.0]})
        out = tmp_path / "out"
        cfg_path = tmp_path / "run.json"
        write_json(cfg_path, {"io": {"out_dir": str(out)}, "numerics": {"grid_points": 8}})
        code = main(
            ["dynamics", "--config", str(cfg_path), "--independent", str(alpha_path), "1.0"]
        )
        assert code == 0
        header = (out / "membership.csv").read_text().splitlines()
        peak = [float(l.split("=")[1]) for l in header if l.startswith("# max_residual")][0]
        assert peak <= 1e-9

    def test_empty_cell_matches_exit_rate(self, tmp_path):
        gen = random_generator(3, seed=4)
        gen_path = tmp_path / "gen.json"
        cdio.write_generator_json(gen_path, gen)
        out = tmp_path / "out"
        cfg_path = tmp_path / "run.json"
        write_json(
            cfg_path,
            {
                "io": {"generator_file": str(gen_path), "out_dir": str(out)},
                "numerics": {"grid_points": 8},
            },
        )
        assert main(["dynamics", "--config", str(cfg_path)]) == 0
        empty_rows = [
            line.split(",")
            for line in (out / "trajectory.csv").read_text().splitlines()
            if not line.startswith(("#", "t,")) and line.split(",")[1] == "0"
        ]
        for t_text, _, p_text in empty_rows:
            assert float(p_text) == pytest.approx(
                np.exp(-gen.r_empty * float(t_text)), abs=1e-9
            )

    def test_generic_triple_residual_recorded(self, tmp_path):
        gen = random_generator(3, seed=4)
        gen_path = tmp_path / "gen.json"
        cdio.write_generator_json(gen_path, gen)
        out = tmp_path / "out"
        cfg_path = tmp_path / "run.json"
        write_json(
            cfg_path,
            {
                "io": {"generator_file": str(gen_path), "out_dir": str(out)},
                "numerics": {"grid_points": 8},
            },
        )
        assert main(["dynamics", "--config", str(cfg_path)]) == 0
        rows = [
            line.split(",")
            for line in (out / "master_residual.csv").read_text().splitlines()
            if not line.startswith(("#", "t,")) and line.split(",")[1] == "7"
        ]
        assert max(abs(float(r[2])) for r in rows) > 1e-3

    def test_byte_identical_reruns(self, tmp_path):
        gen_path = tmp_path / "gen.json"
        cdio.write_generator_json(gen_path, random_generator(3, seed=7))
        cfg_path = tmp_path / "run.json"
        write_json(
            cfg_path,
            {
                "io": {"generator_file": str(gen_path), "out_dir": str(tmp_path / "a")},
                "numerics": {"grid_points": 6},
            },
        )
        outputs = []
        for run in ("a", "b"):
            out = tmp_path / run
            assert main(["dynamics", "--config", str(cfg_path), "--out", str(out)]) == 0
            outputs.append(
                {name.name: name.read_bytes() for name in sorted(out.iterdir())}
            )
        assert outputs[0] == outputs[1]

    def test_missing_generator_exits_2(self, tmp_path):
        cfg_path = tmp_path / "run.json"
        write_json(cfg_path, {"io": {"out_dir": str(tmp_path / "out")}})
        assert main(["dynamics", "--config", str(cfg_path)]) == 2


class TestCmdSearch:
    def _run(self, tmp_path, config):
        cfg_path = tmp_path / "run.json"
        write_json(cfg_path, config)
        return main(["search", "--config", str(cfg_path)])

    def test_model_I_zero_target(self, tmp_path):
        out = tmp_path / "out"
        code = self._run(
            tmp_path,
            {
                "model": "I",
                "N": 4,
                "targets": {"alpha": 0.3, "beta": 0.0},
                "search": {"restarts": 2, "seed": 0},
                "io": {"out_dir": str(out)},
            },
        )
        assert code == 0
        result = json.loads((out / "result.json").read_text())
        assert result["residual_floor"] < 1e-6
        assert (out / "restarts.csv").exists()

    def test_model_I_infeasible_target_still_exits_0(self, tmp_path):
        out = tmp_path / "out"
        code = self._run(
            tmp_path,
            {
                "model": "I",
                "N": 4,
                "targets": {"alpha": 0.3, "beta": 0.5},
                "search": {"restarts": 2, "seed": 0},
                "io": {"out_dir": str(out)},
            },
        )
        assert code == 0
        result = json.loads((out / "result.json").read_text())
        assert result["residual_floor"] > 1e-2

    def test_model_II_coeff_report(self, tmp_path):
        out = tmp_path / "out"
        code = self._run(
            tmp_path,
            {
                "model": "II",
                "M": 3,
                "N": 3,
                "targets": {"alpha": 0.3, "beta": 0.5},
                "search": {"restarts": 1, "seed": 0},
                "io": {"out_dir": str(out)},
            },
        )
        assert code == 0
        report = json.loads((out / "coeff_check.json").read_text())
        assert report["inconsistency"] == pytest.approx(2.0 * np.exp(0.5) - 2.0, abs=1e-12)

    def test_invalid_size_exits_2(self, tmp_path):
        code = self._run(
            tmp_path,
            {
                "model": "I",
                "N": 1,
                "targets": {"alpha": 0.3, "beta": 0.0},
                "io": {"out_dir": str(tmp_path / "out")},
            },
        )
        assert code == 2
