pub mod diagnose;
pub mod eval_cmd;
pub mod gen_data;
pub mod pretrain;
pub mod rank;
pub mod train;
