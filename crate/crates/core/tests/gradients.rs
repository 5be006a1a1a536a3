#[path = "common/gradcheck.rs"]
#[allow(dead_code)]
mod gradcheck;

#[test]
fn traj_logprob_gradient() {
    gradcheck::traj_logprob_gradient();
}

#[test]
fn grpo_gradient_without_kl() {
    gradcheck::grpo_check(0.0);
}

#[test]
fn grpo_gradient_with_kl() {
    gradcheck::grpo_check(0.04);
}

#[test]
fn akbe_gradient() {
    gradcheck::akbe_gradient();
}

#[test]
fn clipped_ce_gradient() {
    gradcheck::clipped_ce_gradient();
}

#[test]
fn total_loss_gradient() {
    gradcheck::total_loss_gradient();
}

#[test]
fn dpo_gradient() {
    gradcheck::dpo_gradient();
}
