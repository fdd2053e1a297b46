from attnatlas.cli import main

main()
