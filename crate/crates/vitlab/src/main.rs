fn main() {
    vitlab::cli::main()
}
