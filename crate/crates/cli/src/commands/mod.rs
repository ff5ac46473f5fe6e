pub mod bench;
pub mod dealer;
pub mod gen_data;
pub mod keygen;
pub mod train;
