from kbvi.harness import main

main()
