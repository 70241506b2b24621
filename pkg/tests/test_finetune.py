import numpy as np
import pytest

from vlpretrain import autograd as ag
from vlpretrain.autograd import Tensor
from vlpretrain.errors import ConfigError
from vlpretrain.finetune import (bce_finetune_loss, build_groups, ce_finetune_loss, finetune_losses, group_logits,
                                 hardest_negative, triplet_finetune_loss, validate_combo)
from vlpretrain.model import Model


@pytest.mark.parametrize("direction", ["image_to_text", "text_to_image"])
def test_groups_have_one_positive(small_corpus, direction):
    pair_img = small_corpus.pair_images()
    groups = list(build_groups(small_corpus, 8, direction, np.random.default_rng(0)))
    assert len(groups) == small_corpus.num_pairs
    for g in groups:
        match = pair_img[g.captions] == g.images
        assert match[0] and not match[1:].any()
        if direction == "image_to_text":
            assert len(set(g.captions)) == 8 and len(set(g.images)) == 1
        else:
            assert len(set(g.images)) == 8 and len(set(g.captions)) == 1


def test_group_errors(small_corpus):
    with pytest.raises(ConfigError):
        next(build_groups(small_corpus, 1, "image_to_text", np.random.default_rng(0)))
    with pytest.raises(ConfigError):
        next(build_groups(small_corpus, 4, "sideways", np.random.default_rng(0)))
    with pytest.raises(ConfigError):
        next(build_groups(small_corpus.subset(range(3)), 4, "text_to_image", np.random.default_rng(0)))


def test_loss_values_on_uniform_scores():
    z = Tensor(np.zeros((3, 4)))
    assert bce_finetune_loss(z).data == pytest.approx(np.log(2))
    assert ce_finetune_loss(z).data == pytest.approx(np.log(4))
    assert triplet_finetune_loss(z, 0.2).data == pytest.approx(0.2)


def test_triplet_zero_beyond_margin():
    z = Tensor(np.array([[1.0, 0.7, 0.1], [2.0, 1.5, 1.7]]), requires_grad=True)
    loss = triplet_finetune_loss(z, 0.2)
    assert loss.data == 0.0
    loss.backward()
    assert np.all(z.grad == 0)


def test_triplet_uses_hardest_negative():
    z = np.array([[0.5, 0.1, 0.45, 0.45]])
    assert hardest_negative(z)[0] == 2
    t = Tensor(z, requires_grad=True)
    triplet_finetune_loss(t, 0.2).backward()
    assert np.allclose(t.grad, [[-1, 0, 1, 0]])
    with pytest.raises(ConfigError):
        triplet_finetune_loss(t, 0.0)


def test_combined_losses_are_additive(rng):
    z = Tensor(rng.standard_normal((5, 6)))
    full = finetune_losses(z, ("binary", "ce", "triplet"))
    parts = sum(finetune_losses(z, (n,))[n].data for n in ("binary", "ce", "triplet"))
    assert full["total"].data == pytest.approx(parts, rel=1e-14)


def test_combo_validation():
    assert validate_combo(["ce"]) == ("ce",)
    with pytest.raises(ConfigError):
        validate_combo([])
    with pytest.raises(ConfigError):
        validate_combo(["binary", "hinge"])


def test_group_logits_shape_and_gradient(small_corpus, small_cfg, vocab):
    m = Model.create(small_cfg, 0)
    groups = list(build_groups(small_corpus, 4, "text_to_image", np.random.default_rng(0), anchors=[0, 1, 2]))
    z = group_logits(m, small_corpus, groups, vocab)
    assert z.shape == (3, 4)
    ce_finetune_loss(z).backward()
    assert np.abs(m.params["head.itm.w"].grad).sum() > 0
    assert ag.grad_enabled()
