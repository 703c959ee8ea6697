//! Split-learning laboratory.
//!
//! A desk-scale testbed for running feature-space hijacking attacks against a
//! split neural network whose client trains with differential privacy, plus a
//! PCA-compression defense. Everything runs on a small f64 tensor engine with
//! reverse-mode autodiff; client and server are independent actors joined by
//! an in-process queue or a TCP socket.

pub mod data;
pub mod defense;
pub mod dp;
pub mod fsha;
pub mod harness;
pub mod nn;
pub mod protocol;
pub mod tensor;
