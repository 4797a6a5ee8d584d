import json
import math
import subprocess
import sys

import numpy as np
import pytest

from blanketmh import compile as C
from blanketmh import infer as I
from blanketmh import models, nn
from blanketmh.distributions import Bernoulli, Normal
from blanketmh.graph import Model, addr, ancestral_sample, random_variable


def cfg(**kw):
    base = dict(num_worlds=64, epochs=2, batch_size=16, components=2, seed=0)
    base.update(kw)
    return C.TrainingConfig(**base)


class Gate(Model):
    """``extra`` exists only when ``flag`` is set."""

    name = "gate"

    def __init__(self, observations=None):
        super().__init__(observations, queries=[addr("flag")])

    @random_variable
    def flag(self, read):
        return Bernoulli(0.5)

    @random_variable
    def extra(self, read):
        return Normal(0.0, 1.0)

    @random_variable
    def out(self, read):
        return Normal(read("extra") if read("flag") else 0.0, 1.0)


class Coin(Model):
    name = "coin"

    def __init__(self, observations=None):
        super().__init__(observations, queries=[addr("s")])

    @random_variable
    def s(self, read):
        return Bernoulli(0.5)

    @random_variable
    def o(self, read):
        return Normal(1.0 if read("s") else 0.0, 1.0)


@pytest.fixture(scope="module")
def conj_store():
    return C.train(models.conj_normal().model, cfg())


class TestDataset:
    def test_single_world_samples_observed_role(self):
        z = models.conj_normal()
        (w,) = C.generate_dataset(z.model, 1, 0)
        assert set(w.nodes) == {addr("x"), addr("y")}
        assert w.value(addr("y")) != 0.25

    def test_marginal_sd_of_observation(self):
        z = models.conj_normal()
        ys = [w.value(addr("y")) for w in C.iter_dataset(z.model, 10_000, 1)]
        assert np.std(ys) == pytest.approx(math.sqrt(2.0**2 + 0.1**2), abs=0.05)

    def test_seed_determinism(self):
        z = models.nuisance_model(3)
        a = [sorted((str(k), n.value) for k, n in w.nodes.items()) for w in C.generate_dataset(z.model, 5, 7)]
        b = [sorted((str(k), n.value) for k, n in w.nodes.items()) for w in C.generate_dataset(z.model, 5, 7)]
        assert a == b

    def test_prior_inflation_widens_roots(self):
        z = models.conj_normal()
        xs = [w.value(addr("x")) for w in C.iter_dataset(z.model, 4000, 2, prior_inflation=3.0)]
        assert np.std(xs) == pytest.approx(6.0, rel=0.06)


class TestLoss:
    def test_uniform_logits_cost_log_two(self, rng):
        m = Coin({addr("o"): 0.3})
        store = C.train(m, cfg(epochs=0, num_worlds=8))
        store.params["s.head.W"][:] = 0.0
        store.params["s.head.b"][:] = 0.0
        w = ancestral_sample(m, rng)
        assert float(C.loss(store, w, model=m).data) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_loss_decreases_over_windows(self):
        store = C.train(models.conj_normal().model, cfg(num_worlds=200, epochs=40, components=1, lr=3e-3))
        h = np.asarray(store.provenance["loss_history"])
        windows = h.reshape(4, 10).mean(axis=1)
        assert np.all(np.diff(windows) < 0)

    def test_missing_family_raises(self, conj_store, rng):
        w = ancestral_sample(models.conj_normal().model, rng)
        with pytest.raises(nn.MissingArtifact):
            C.loss(conj_store.without("x"), w)


class TestTrain:
    def test_seed_determinism(self):
        m = models.conj_normal().model
        a, b = C.train(m, cfg(seed=3)), C.train(m, cfg(seed=3))
        assert a.provenance["final_loss"] == b.provenance["final_loss"]
        assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)

    def test_absent_family_is_simply_missing(self, rng):
        m = Gate({addr("out"): 0.0})
        worlds = []
        while len(worlds) < 16:
            w = ancestral_sample(m.conditioned({}), rng)
            if not w.value(addr("flag")):
                worlds.append(w)
        store = C.train(m, cfg(num_worlds=16), worlds=worlds)
        assert "extra" not in store.specs
        assert store.has_proposer("flag")

    def test_nuisance_adds_exactly_one_family(self):
        base = C.train(models.nuisance_model(0).model, cfg(num_worlds=16, epochs=0))
        more = C.train(models.nuisance_model(5).model, cfg(num_worlds=16, epochs=0))
        E, H, L, K = 4, 8, 3, 2
        arithmetic = (E * 2 + E) + (E * H + H * H * (L - 1)) + (3 * K * (E + H) + 3 * K)
        assert more.param_count(["nuisance"]) == arithmetic
        assert more.param_count() == base.param_count() + arithmetic

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            C.TrainingConfig(num_worlds=0)
        with pytest.raises(ValueError):
            C.TrainingConfig(lr_final=0.0)
        with pytest.raises(ValueError):
            C.TrainingConfig(log_sd_min=1.0, log_sd_max=0.0)

    def test_inference_does_not_mutate_store(self, conj_store):
        before = {k: v.copy() for k, v in conj_store.params.items()}
        z = models.conj_normal()
        I.run_chains(z.model, None, I.LicProposer(conj_store), I.ChainConfig(20, 5, 1), 2)
        for k, v in before.items():
            np.testing.assert_array_equal(conj_store.params[k], v)


class TestLearningRate:
    def test_constant_without_final(self):
        c = cfg(epochs=5)
        assert [C.epoch_lr(c, e) for e in range(5)] == [c.lr] * 5

    def test_geometric_decay_hits_both_ends(self):
        c = cfg(epochs=5, lr=1e-2, lr_final=1e-4)
        rates = [C.epoch_lr(c, e) for e in range(5)]
        assert rates[0] == pytest.approx(1e-2) and rates[-1] == pytest.approx(1e-4)
        np.testing.assert_allclose(np.diff(np.log(rates)), math.log(1e-2) / 4)

    def test_single_epoch_uses_initial_rate(self):
        assert C.epoch_lr(cfg(epochs=1, lr=1e-2, lr_final=1e-4), 0) == 1e-2


class TestArtifactFile:
    def test_roundtrip_bit_identical(self, conj_store, tmp_path):
        p = tmp_path / "a.json"
        C.save(conj_store, p)
        back = C.load(p)
        assert sorted(back.params) == sorted(conj_store.params)
        for k, v in conj_store.params.items():
            assert back.params[k].tobytes() == v.tobytes()
        assert back.specs.keys() == conj_store.specs.keys()

    def test_layout(self, conj_store, tmp_path):
        p = tmp_path / "a.json"
        C.save(conj_store, p)
        doc = json.loads(p.read_text())
        assert doc["version"] == "1"
        assert set(doc["families"]["x"]) == {"embed", "agg", "head", "support"}
        t = doc["families"]["x"]["embed"]["W"]
        assert len(t["data"]) == math.prod(t["shape"])

    def test_unknown_version(self, conj_store, tmp_path):
        doc = conj_store.to_json()
        doc["version"] = "99"
        p = tmp_path / "v.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(C.VersionError):
            C.load(p)

    @pytest.mark.parametrize("text", ["{not json", "[]", '{"version": "1"}'])
    def test_malformed(self, tmp_path, text):
        p = tmp_path / "bad.json"
        p.write_text(text)
        with pytest.raises(ValueError):
            C.load(p)

    def test_fresh_process_reproduces_phi(self, conj_store, tmp_path):
        p = tmp_path / "a.json"
        C.save(conj_store, p)
        w = ancestral_sample(models.conj_normal().model, np.random.default_rng(0))
        phi = nn.compute_phi(conj_store, w, addr("x"))
        here = json.dumps([phi.weights.tolist(), phi.means.tolist(), phi.sds.tolist()])
        script = (
            "import json, numpy as np\n"
            "from blanketmh import compile as C, models, nn\n"
            "from blanketmh.graph import addr, ancestral_sample\n"
            f"s = C.load({str(p)!r})\n"
            "w = ancestral_sample(models.conj_normal().model, np.random.default_rng(0))\n"
            "phi = nn.compute_phi(s, w, addr('x'))\n"
            "print(json.dumps([phi.weights.tolist(), phi.means.tolist(), phi.sds.tolist()]))\n"
        )
        there = subprocess.run([sys.executable, "-c", script], capture_output=True, text=True, check=True)
        assert there.stdout.strip() == here
