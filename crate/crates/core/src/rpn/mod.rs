//! Region-proposal head: anchors, label assignment, the three conv branches
//! and their losses.

mod anchors;
mod head;
mod labels;
mod loss;

pub use anchors::{decode_boxes, decode_one, encode_box, generate_anchors, AnchorConfig, AnchorGrid, MAX_LOG_SCALE};
pub use head::{HeadOutput, RpnHead};
pub use labels::{
    assign_labels_center_distance, assign_labels_iou, AssignConfig, AssignScheme, LabelTargets,
};
pub use loss::{classification_losses, regression_loss, total_loss, total_loss_value, LossWeights};
