fn main() {
    refold_core::init();
}
