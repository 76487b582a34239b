fn main() {
    csvscale::cli::main()
}
