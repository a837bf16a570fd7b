import copy
import math

import pytest
import torch
import torch.nn.functional as F

from dfcil.losses import (Ablation, MixedBatch, ObjectiveWeights, feature_distillation_loss, ft_ce_loss,
                          kd_di_loss, kl_padded, local_ce_loss, lwf_di_objective, ours_objective,
                          squared_distance, task_balance_weights, weighted_feature_distillation_loss,
                          weighted_squared_distance)
from dfcil.model import snapshot
from dfcil.synthesis import (BatchNormStats, content_loss_from_logits, diversity_loss, smoothness_prior_loss,
                             stat_alignment_loss)

from .conftest import max_relative_error, tiny_model

GRAD_TOL = 1e-4


def _pair(seed=0):
    """Teacher over task 1 (3 classes); student grown with task 2 (2 classes) and nudged."""
    base = tiny_model((3,), seed=seed)
    base.eval()
    teacher = snapshot(base, 0)
    student = copy.deepcopy(base)
    student.grow_heads([3, 4], generator=torch.Generator().manual_seed(seed + 1))
    student.double()
    with torch.no_grad():
        for p in student.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=torch.Generator().manual_seed(seed + 7), dtype=p.dtype))
    return teacher, student


def _batch(n=6, n_syn=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 2, 4, 4, generator=g, dtype=torch.float64)
    y = torch.randint(3, 5, (n,), generator=g)
    x_syn = torch.randn(n_syn, 2, 4, 4, generator=g, dtype=torch.float64)
    y_syn = torch.randint(0, 3, (n_syn,), generator=g)
    return MixedBatch(x, y, x_syn, y_syn)


# --- gradient suite ----------------------------------------------------------------------------

def test_gradient_diversity(double):
    logits = torch.randn(5, 3, generator=torch.Generator().manual_seed(0)).requires_grad_()
    err = max_relative_error(lambda: diversity_loss(torch.softmax(logits, 1)), [logits])
    assert err < GRAD_TOL


def test_gradient_content(double):
    logits = torch.randn(5, 3, generator=torch.Generator().manual_seed(1)).requires_grad_()
    err = max_relative_error(lambda: content_loss_from_logits(logits, 2.0)[0], [logits])
    assert err < GRAD_TOL


def test_gradient_stat_alignment(double):
    g = torch.Generator().manual_seed(2)
    mu = [torch.randn(3, generator=g), torch.randn(2, generator=g)]
    sd = [torch.rand(3, generator=g) + 0.5, torch.rand(2, generator=g) + 0.5]
    mh = [torch.randn(3, generator=g).requires_grad_(), torch.randn(2, generator=g).requires_grad_()]
    sh = [(torch.rand(3, generator=g) + 0.5).requires_grad_(), (torch.rand(2, generator=g) + 0.5).requires_grad_()]
    fn = lambda: stat_alignment_loss(BatchNormStats(mu, sd), BatchNormStats(mh, sh))
    assert max_relative_error(fn, mh + sh) < GRAD_TOL


def test_gradient_prior(double):
    x = torch.randn(2, 2, 4, 4, generator=torch.Generator().manual_seed(3)).requires_grad_()
    assert max_relative_error(lambda: smoothness_prior_loss(x), [x]) < GRAD_TOL


def test_gradient_kd_di(double):
    teacher, student = _pair()
    b = _batch()
    err = max_relative_error(lambda: kd_di_loss(student, teacher, b.x, 2.0), list(student.parameters()))
    assert err < GRAD_TOL


def test_gradient_local_ce(double):
    _, student = _pair()
    b = _batch()
    err = max_relative_error(lambda: local_ce_loss(student, b.x, b.y), list(student.parameters()))
    assert err < GRAD_TOL


def test_gradient_weighted_feature(double):
    teacher, student = _pair()
    b = _batch()
    fn = lambda: weighted_feature_distillation_loss(student, teacher, b)
    assert max_relative_error(fn, list(student.parameters())) < GRAD_TOL


def test_gradient_ft_ce(double):
    _, student = _pair()
    b = _batch()
    heads = list(student.heads.parameters())
    assert max_relative_error(lambda: ft_ce_loss(student, b), heads) < GRAD_TOL


# --- KD ----------------------------------------------------------------------------------------------

def test_kd_zero_for_identical_models(double):
    teacher, _ = _pair()
    student = copy.deepcopy(teacher.model)
    assert abs(kd_di_loss(student, teacher, _batch().x, 2.0).item()) < 1e-12


def test_kd_vanishes_when_new_heads_are_silenced(double):
    teacher, _ = _pair()
    student = copy.deepcopy(teacher.model)
    student.grow_heads([3, 4])
    with torch.no_grad():
        student.heads[1].weight.zero_()
        student.heads[1].bias.fill_(-1e9)
    assert kd_di_loss(student, teacher, _batch().x, 2.0).item() < 1e-6


def test_kd_nonnegative_and_temperature_checked(double):
    g = torch.Generator().manual_seed(0)
    for _ in range(10):
        assert kl_padded(torch.randn(4, 6, generator=g), torch.randn(4, 3, generator=g), 2.0).item() >= 0
    with pytest.raises(ValueError):
        kl_padded(torch.zeros(1, 3), torch.zeros(1, 2), 0.0)


# --- local CE ----------------------------------------------------------------------------------------

def test_local_ce_uniform_value(double):
    base = tiny_model((4, 10))
    with torch.no_grad():
        base.heads[1].weight.zero_()
        base.heads[1].bias.zero_()
    x = torch.randn(3, 2, 4, 4)
    y = torch.tensor([4, 9, 13])
    assert local_ce_loss(base, x, y).item() == pytest.approx(math.log(10), abs=1e-12)


def test_local_ce_confident_limit(double):
    m = tiny_model((2, 2))
    with torch.no_grad():
        m.heads[1].weight.zero_()
        m.heads[1].bias.copy_(torch.tensor([0.0, 1e3]))
    assert local_ce_loss(m, torch.randn(2, 2, 4, 4), torch.tensor([3, 3])).item() < 1e-12


def test_local_ce_ignores_past_heads(double):
    _, student = _pair()
    b = _batch()

    def value_and_grads():
        student.zero_grad()
        loss = local_ce_loss(student, b.x, b.y)
        loss.backward()
        return loss.item(), [p.grad.clone() if p.grad is not None else None for p in student.parameters()]

    v0, g0 = value_and_grads()
    with torch.no_grad():
        student.heads[0].weight.add_(torch.randn_like(student.heads[0].weight))
        student.heads[0].bias.add_(3.0)
    v1, g1 = value_and_grads()
    assert v0 == v1
    for a, c in zip(g0, g1):
        assert (a is None and c is None) or torch.equal(a, c)
    assert student.heads[0].weight.grad is None or torch.all(student.heads[0].weight.grad == 0)


def test_local_ce_rejects_past_labels(double):
    _, student = _pair()
    with pytest.raises(ValueError, match="outside"):
        local_ce_loss(student, _batch().x, torch.tensor([0, 3, 3, 3, 3, 3]))


# --- feature distillation ----------------------------------------------------------------------------------

def test_feature_distillation_basics(double):
    teacher, _ = _pair()
    student = copy.deepcopy(teacher.model)
    assert feature_distillation_loss(student, teacher, _batch().x).item() == 0
    a, b = torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])
    assert squared_distance(a, b).item() == 2
    with pytest.raises(ValueError):
        squared_distance(torch.zeros(1, 2), torch.zeros(1, 3))


def test_weighted_identity_reduces_to_plain(double):
    teacher, student = _pair()
    student.eval()
    b = _batch()
    w = weighted_feature_distillation_loss(student, teacher, b, weight=torch.eye(student.feature_dim))
    plain = feature_distillation_loss(student, teacher, torch.cat([b.x, b.x_syn]))
    assert abs(w.item() - plain.item()) < 1e-12


def test_weighted_hand_case(double):
    z_t = torch.tensor([[0.5, -1.0]])
    z_s = z_t + torch.tensor([[1.0, 1.0]])
    assert weighted_squared_distance(z_s, z_t, torch.tensor([[2.0, 0.0]])).item() == 4.0
    # the zero-weight direction may drift freely
    assert weighted_squared_distance(z_t + torch.tensor([[0.0, 5.0]]), z_t, torch.tensor([[2.0, 0.0]])).item() == 0


def test_weighted_zero_for_teacher_copy(double):
    teacher, _ = _pair()
    student = copy.deepcopy(teacher.model)
    assert weighted_feature_distillation_loss(student, teacher, _batch()).item() == 0


# --- FT ----------------------------------------------------------------------------------------------------

def test_ft_backbone_gradient_is_exactly_zero(double):
    _, student = _pair()
    student.zero_grad()
    ft_ce_loss(student, _batch()).backward()
    for p in student.backbone.parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    assert torch.count_nonzero(student.heads[0].weight.grad) > 0


def test_ft_uniform_value(double):
    m = tiny_model((10, 10))
    for h in m.heads:
        with torch.no_grad():
            h.weight.zero_()
            h.bias.zero_()
    b = MixedBatch(torch.randn(4, 2, 4, 4), torch.tensor([10, 12, 15, 19]),
                   torch.randn(4, 2, 4, 4), torch.tensor([0, 1, 5, 9]))
    assert ft_ce_loss(m, b, balance=False).item() == pytest.approx(math.log(20), abs=1e-12)
    assert ft_ce_loss(m, b, balance=True).item() == pytest.approx(math.log(20), abs=1e-12)


def test_task_balance_equal_tasks_gives_unit_weights(double):
    mask = torch.tensor([False] * 4 + [True] * 4)
    torch.testing.assert_close(task_balance_weights(mask, 5, 5), torch.ones(8))


def test_task_balance_equalizes_per_class_mass(double):
    # 15 past classes and 5 new classes; 1:1 real/synthetic batch of 40
    mask = torch.tensor([False] * 20 + [True] * 20)
    w = task_balance_weights(mask, 15, 5)
    assert w.mean().item() == pytest.approx(1.0, abs=1e-12)
    # known per-sample losses: 1 for every sample, so each class gets its weight mass
    per_class_new = w[:20].sum() / 5
    per_class_past = w[20:].sum() / 15
    assert per_class_new.item() == pytest.approx(per_class_past.item(), abs=1e-12)


def test_task_balance_weighted_sum(double):
    _, student = _pair()
    b = _batch()
    with torch.no_grad():
        z = torch.cat([student.features(b.x), student.features(b.x_syn)])
        per = F.cross_entropy(student.head_logits(z), student.class_to_unit(torch.cat([b.y, b.y_syn])),
                              reduction="none")
    w = task_balance_weights(b.provenance, 3, 2)
    assert ft_ce_loss(student, b).item() == pytest.approx((w * per).mean().item(), abs=1e-12)


# --- combined objectives --------------------------------------------------------------------------------------

def test_objective_weight_defaults():
    w = ObjectiveWeights()
    assert (w.lambda_kd, w.lambda_ft, w.kd_temperature) == (0.1, 1.0, 2.0)
    with pytest.raises(ValueError):
        ObjectiveWeights(kd_temperature=0)
    with pytest.raises(ValueError):
        ObjectiveWeights(lambda_kd=-1)


def test_ours_zero_weights_equal_local_ce(double):
    teacher, student = _pair()
    b = _batch()
    total, _ = ours_objective(student, teacher, b, ObjectiveWeights(lambda_kd=0, lambda_ft=0))
    assert total.item() == local_ce_loss(student, b.x, b.y).item()


def test_ours_total_is_sum_of_breakdown(double):
    teacher, student = _pair()
    total, parts = ours_objective(student, teacher, _batch(), ObjectiveWeights())
    assert set(parts) == {"ce", "wfeat", "ft"}
    assert abs(total.item() - sum(parts.values())) < 1e-9


def test_ours_ce_term_is_blind_to_synthetic_data(double):
    teacher, student = _pair()
    b = _batch()
    _, with_syn = ours_objective(student, teacher, b, ObjectiveWeights())
    _, without = ours_objective(student, teacher, MixedBatch(b.x, b.y), ObjectiveWeights())
    assert with_syn["ce"] == without["ce"]


def test_ours_first_task_is_plain_ce(double):
    m = tiny_model((3,))
    b = MixedBatch(torch.randn(4, 2, 4, 4), torch.tensor([0, 1, 2, 0]))
    total, parts = ours_objective(m, None, b, ObjectiveWeights())
    assert total.item() == F.cross_entropy(m.logits(b.x), b.y).item()
    assert list(parts) == ["ce"]


def test_ablation_terms(double):
    teacher, student = _pair()
    b = _batch()
    w = ObjectiveWeights()
    _, p = ours_objective(student, teacher, b, w, Ablation(no_ft=True))
    assert "ft" not in p
    student.eval()
    _, real = ours_objective(student, teacher, b, w, Ablation(wfeat_real_only=True))
    wf = weighted_feature_distillation_loss(student, teacher, MixedBatch(b.x, b.y))
    assert real["wfeat"] == pytest.approx(0.1 * wf.item(), abs=1e-12)
    _, std = ours_objective(student, teacher, b, w, Ablation(standard_ce=True))
    assert std["ce"] == pytest.approx(F.cross_entropy(student.logits(b.x), student.class_to_unit(b.y)).item())
    with pytest.raises(ValueError):
        Ablation(wfeat_real_only=True, wfeat_synth_only=True)


def test_lwf_reduction_without_synthetic(double):
    teacher, student = _pair()
    b = _batch()
    total, parts = lwf_di_objective(student, teacher, MixedBatch(b.x, b.y, b.x[:0], b.y[:0]), 2.0)
    ce = F.cross_entropy(student.logits(b.x), student.class_to_unit(b.y))
    lwf = ce + kd_di_loss(student, teacher, b.x, 2.0)
    assert set(parts) == {"ce", "kd_real"}
    assert abs(total.item() - lwf.item()) < 1e-12


def test_lwf_kd_vanishes_for_silenced_copy(double):
    teacher, _ = _pair()
    student = copy.deepcopy(teacher.model)
    student.grow_heads([3, 4])
    with torch.no_grad():
        student.heads[1].weight.zero_()
        student.heads[1].bias.fill_(-1e9)
    b = _batch()
    b.y = torch.tensor([0, 1, 2, 0, 1, 2])
    total, parts = lwf_di_objective(student, teacher, b, 2.0)
    assert parts["kd_real"] < 1e-6 and parts["kd_syn"] < 1e-6
    assert math.isfinite(total.item())
    assert total.item() == pytest.approx(parts["ce"], abs=1e-5)
