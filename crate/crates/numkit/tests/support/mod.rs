pub mod op_sweep;
