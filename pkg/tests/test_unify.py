import numpy as np
import pytest

from _support import COARSE, FINE, coarse_fine_hierarchy
from tagunify.corpus import GeneratorSpec, generate_synthetic, selective_retag
from tagunify.estimators import CRFTagger
from tagunify.evalmetrics import micro_prf
from tagunify.features import Model, hash_feature
from tagunify.lattice import posterior
from tagunify.objectives import DistillConfig
from tagunify.tagspace import TagSet, flat_hierarchy
from tagunify.trainer import TrainConfig, evaluate_checkpoint
from tagunify.unify import (ScenarioConfig, ScenarioError, TeacherHandle, distill, merge_corpus,
                            postprocess_merge, teacher_marginals, unify_labels)

TOKENS = ["w1", "w2", "w3"]


def bias_model(tagset, label, strength, kind="crf"):
    m = Model(tagset, kind=kind)
    m.add_features([TOKENS])
    m.weights[m._index[hash_feature("bias", m.seed)], tagset.index(label)] = strength
    return m


@pytest.fixture(scope="module")
def views():
    c = generate_synthetic(GeneratorSpec(("GPE", "DATE"), seed=11), 300)
    test = generate_synthetic(GeneratorSpec(("GPE", "DATE"), seed=12), 100)
    a = selective_retag(c.subset(range(150)), {"GPE"}, "gpe")
    b = selective_retag(c.subset(range(150, 300)), {"DATE"}, "date")
    h = flat_hierarchy(a.tagset, b.tagset)
    kw = dict(learning_rate=0.5, max_epochs=4, patience=4)
    ta = CRFTagger(tagset=a.tagset, **kw).fit(a.sentences, a.labels).model_
    tb = CRFTagger(tagset=b.tagset, **kw).fit(b.sentences, b.labels).model_
    return c, test, a, b, h, [TeacherHandle.from_model(ta, h), TeacherHandle.from_model(tb, h)]


def test_teacher_marginals_crf_and_local(tmp_path):
    ts = TagSet("x", ("X",))
    crf = bias_model(ts, "B-X", 1.0)
    q = teacher_marginals(TeacherHandle.from_model(crf, flat_hierarchy(ts)), [TOKENS], tau=2.0)[0]
    expect = posterior(crf.lattice(crf.featurize(TOKENS)).scaled(0.5), with_pairs=False).node
    np.testing.assert_allclose(q, expect)
    loc = bias_model(ts, "B-X", 1.0, kind="local")
    q = teacher_marginals(TeacherHandle.from_model(loc, flat_hierarchy(ts)), [TOKENS])[0]
    row = np.exp([0.0, 1.0, 0.0])
    np.testing.assert_allclose(q, np.tile(row / row.sum(), (3, 1)))


def test_teacher_marginals_cache(tmp_path, monkeypatch):
    ts = TagSet("x", ("X",))
    t = TeacherHandle.from_model(bias_model(ts, "B-X", 1.0), flat_hierarchy(ts))
    first = teacher_marginals(t, [TOKENS], cache_dir=tmp_path)
    files = list(tmp_path.glob("q-*.npz"))
    assert len(files) == 1
    again = teacher_marginals(t, [TOKENS], cache_dir=tmp_path)
    np.testing.assert_array_equal(first[0], again[0])
    monkeypatch.setenv("TAGUNIFY_CACHE_DIR", str(tmp_path / "env"))
    teacher_marginals(t, [TOKENS], tau=3.0)
    assert len(list((tmp_path / "env").glob("q-*.npz"))) == 1


def test_teacher_must_fit_hierarchy():
    h = coarse_fine_hierarchy()
    with pytest.raises(ScenarioError):
        TeacherHandle.from_model(Model(TagSet("coarse", ("G", "EXTRA"))), h)
    with pytest.raises(ScenarioError):
        TeacherHandle.from_model(Model(TagSet("other", ("Q",))), h)


def test_merge_tie_goes_to_first_teacher():
    gx, gy = TagSet("x", ("X",)), TagSet("y", ("Y",))
    h = flat_hierarchy(gx, gy)
    tx = TeacherHandle.from_model(bias_model(gx, "B-X", 3.0), h)
    ty = TeacherHandle.from_model(bias_model(gy, "B-Y", 3.0), h)
    assert postprocess_merge([tx, ty], TOKENS, h) == ["B-X"] * 3
    assert postprocess_merge([ty, tx], TOKENS, h) == ["B-Y"] * 3
    ty_strong = TeacherHandle.from_model(bias_model(gy, "B-Y", 3.5), h)
    assert postprocess_merge([tx, ty_strong], TOKENS, h) == ["B-Y"] * 3
    with pytest.raises(ScenarioError):
        postprocess_merge([], TOKENS, h)


def test_merge_maps_coarse_to_representative_leaf():
    h = coarse_fine_hierarchy()
    coarse = TeacherHandle.from_model(bias_model(COARSE, "B-G", 3.0), h)
    assert postprocess_merge([coarse], TOKENS, h) == [f"B-{h.representative_leaf('G')}"] * 3
    silent = TeacherHandle.from_model(bias_model(FINE, "O", 3.0), h)
    assert postprocess_merge([silent], TOKENS, h) == ["O"] * 3


def test_merge_repairs_orphan_inside():
    gx = TagSet("x", ("X",))
    h = flat_hierarchy(gx)
    m = bias_model(gx, "I-X", 3.0)
    # Without the BIO mask the decode is all I-X; repair turns the first into B-X.
    assert postprocess_merge([TeacherHandle.from_model(m, h)], TOKENS, h, bio_mask=False) == \
        ["B-X", "I-X", "I-X"]


def test_scenario_validation(views):
    c, _, a, b, h, teachers = views
    with pytest.raises(ScenarioError, match="unknown mode"):
        ScenarioConfig("bogus", h, teachers).validate()
    with pytest.raises(ScenarioError, match="teacher"):
        ScenarioConfig("mardi", h, [], unlabeled=[["a"]]).validate()
    with pytest.raises(ScenarioError, match="unlabeled"):
        ScenarioConfig("mardi", h, teachers).validate()
    with pytest.raises(ScenarioError, match="labeled"):
        ScenarioConfig("mardi-data", h, teachers).validate()
    with pytest.raises(ScenarioError, match="exactly one"):
        ScenarioConfig("progressive", h, teachers, labeled=[a]).validate()


def test_mardi_combines_teachers(views):
    c, test, a, b, h, teachers = views
    cfg = ScenarioConfig("mardi", h, teachers, unlabeled=c.sentences,
                         train=TrainConfig(learning_rate=0.5, max_epochs=4))
    student, rep = distill(cfg)
    assert student.labels == h.unified.labels
    f_student = evaluate_checkpoint(student, test.sentences, test.labels).f1
    f_pp = micro_prf(test.labels, merge_corpus(teachers, test.sentences, h)).f1
    assert f_student > 0.8 and f_pp > 0.8
    assert rep.losses[-1] < rep.losses[0]


def test_alpha_zero_never_reads_gold_labels(views):
    c, _, a, b, h, teachers = views
    scrambled = a.subset(range(len(a)))
    scrambled.labels = [["O"] * len(s) for s in a.sentences]

    def run(corpus):
        cfg = ScenarioConfig("mardi-data", h, teachers, labeled=[corpus, b],
                             distill=DistillConfig(alpha=0.0),
                             train=TrainConfig(learning_rate=0.5, max_epochs=1))
        return distill(cfg)[0]

    assert run(a).equals(run(scrambled))
    cfg = ScenarioConfig("mardi-data", h, teachers, labeled=[scrambled, b],
                         distill=DistillConfig(alpha=0.5), train=TrainConfig(learning_rate=0.5, max_epochs=1))
    assert not distill(cfg)[0].equals(run(a))


def test_init_must_match_unified_space(views):
    c, _, a, b, h, teachers = views
    cfg = ScenarioConfig("mardi", h, teachers, unlabeled=c.sentences[:5], init=Model(a.tagset))
    with pytest.raises(ScenarioError, match="unified"):
        distill(cfg)


def test_unify_labels_maps_coarse_to_leaf():
    h = coarse_fine_hierarchy()
    from tagunify.corpus import AnnotatedCorpus
    c = AnnotatedCorpus([["a", "b", "c"]], [["B-G", "I-G", "B-D"]], COARSE)
    leaf = h.representative_leaf("G")
    assert unify_labels(c, h) == [[f"B-{leaf}", f"I-{leaf}", "B-D"]]
    with pytest.raises(KeyError):
        unify_labels(AnnotatedCorpus([["a"]], [["B-Q"]], TagSet("q", ("Q",))), h)
