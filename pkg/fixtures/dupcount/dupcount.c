/* dupcount: counts how many values in a pseudo-random stream repeat an
 * earlier value.
 *
 *   dupcount [n]       stream length, default 200000
 *   dupcount selftest  fixed-vector checks, non-zero exit on mismatch
 */
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

static unsigned int lcg_state;

static void seed_stream(unsigned int seed) {
    lcg_state = seed;
}

/* Values land in [0, 2003), so long streams are duplicate-heavy. */
static unsigned int next_value(void) {
    lcg_state = lcg_state * 1664525u + 1013904223u;
    return (lcg_state >> 8) % 2003u;
}

static long count_duplicates(const unsigned int *values, long n) {
    long count = 0;
    for (long i = 1; i < n; i++) {
        for (long j = 0; j < i; j++) {
            if (values[j] == values[i]) {
                count++;
                break;
            }
        }
    }
    return count;
}

static int selftest(void) {
    static const unsigned int fixed[] = {3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5};
    unsigned int stream[256];
    long got = count_duplicates(fixed, 11);
    if (got != 4) {
        fprintf(stderr, "selftest: fixed vector expected 4, got %ld\n", got);
        return 1;
    }
    seed_stream(12345u);
    for (int i = 0; i < 256; i++)
        stream[i] = next_value();
    if (stream[0] != 1790u || stream[1] != 1212u || stream[2] != 995u) {
        fprintf(stderr, "selftest: stream prefix mismatch\n");
        return 1;
    }
    got = count_duplicates(stream, 256);
    if (got != 19) {
        fprintf(stderr, "selftest: stream of 256 expected 19, got %ld\n", got);
        return 1;
    }
    return 0;
}

int main(int argc, char **argv) {
    long n = 200000;
    unsigned int *values;
    if (argc > 1 && strcmp(argv[1], "selftest") == 0)
        return selftest();
    if (argc > 1)
        n = strtol(argv[1], NULL, 10);
    if (n < 0)
        return 1;
    values = malloc((size_t)n * sizeof *values);
    if (values == NULL)
        return 1;
    seed_stream(12345u);
    for (long i = 0; i < n; i++)
        values[i] = next_value();
    printf("duplicates=%ld\n", count_duplicates(values, n));
    free(values);
    return 0;
}
