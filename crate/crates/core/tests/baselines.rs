//! Untrained losses sit at the uniform-prediction values.

#[macro_use]
mod suite;

suite_tests!(baselines:
    cc_loss_is_log_num_classes,
    pn_loss_is_log_five,
    rotation_loss_is_four_log_four,
    location_loss_is_eight_log_eight,
);
